"""Command-line entry point: mine, train-encoder, train-flow, match, eval, probe, report-weights.

Every command is a pure function of (config, inputs, seed). Outputs go to
``--out``; failures print one JSON object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import io
from . import rng as rngmod
from . import tensor as T
from .config import ConfigError, RunConfig, dump_config, load_config, validate
from .encoder import Backbone, BackboneConfig, TrainSample, extract_features, make_state, train_epoch
from .evaluation import EvalError, nn_match, pck, pck_records, pck_table, receptive_field_probe
from .flownet import (FlowHistory, FlowModel, FlowNetConfig, FlowSample, dense_map, make_flow_model,
                      make_flow_optimizer, predict, segment, train_flownet, warp_image)
from .miner import Correspondence, build_image_graph, mine_pairs, overlay_image, pair_key
from .msconv import weight_report

log = logging.getLogger("msflow")

COMMANDS = ("mine", "train-encoder", "train-flow", "match", "eval", "probe", "report-weights")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(directory, module, optimizer, meta: dict):
    tensors = {f"param.{k}": v for k, v in module.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state_dict().items()})
    io.save_checkpoint(directory, tensors, meta)


def _split(tensors: dict[str, np.ndarray]):
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    optim = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    return params, optim


def load_backbone(directory) -> tuple[Backbone, dict, dict]:
    tensors, meta = io.load_checkpoint(directory)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{directory} is not an encoder checkpoint")
    params, optim = _split(tensors)
    bb = Backbone(BackboneConfig(**meta["backbone"]), np.random.default_rng(0))
    bb.load_state_dict(params)
    return bb, meta, optim


def load_flow_model(directory) -> tuple[FlowModel, dict, dict]:
    tensors, meta = io.load_checkpoint(directory)
    if meta.get("kind") != "flow":
        raise ValueError(f"{directory} is not a flow checkpoint")
    params, optim = _split(tensors)
    model = FlowModel(meta["feat_dim"], tuple(meta["grid"]), FlowNetConfig(**meta["flownet"]), np.random.default_rng(0))
    model.load_state_dict(params)
    return model, meta, optim


def _require(value, name: str, command: str):
    if value is None:
        raise ConfigError(name, f"required by {command}")
    return value


def _backbone_for(cfg: RunConfig, checkpoint) -> Backbone:
    if checkpoint:
        return load_backbone(checkpoint)[0]
    return Backbone(cfg.backbone_config(), rngmod.stream(cfg.seed, "backbone"))


def _stored_hw(root) -> dict[str, tuple[int, int]]:
    return {i: ds.image_size_of(p) for i, p in ds.image_paths(root).items()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mine(cfg: RunConfig, out: Path, jobs: int) -> dict:
    root, size = cfg.data.path, cfg.data.image_size
    images = ds.load_images(root, size)
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        log.warning("no images under %s/images; writing empty output", root)
        ds.write_pairs(out / "pairs.jsonl", [])
        return {"pairs": 0, "correspondences": 0}
    classes = ds.load_classes(root)
    unlabeled = [i for i in images if i not in classes]
    if unlabeled:
        raise ds.DatasetError(f"images without a class label in classes.json: {unlabeled}")
    backbone = _backbone_for(cfg, cfg.mining.encoder_checkpoint)
    graph = build_image_graph(images, classes, backbone, cfg.mining.k)
    mined = mine_pairs(graph, images, backbone, cfg.miner_config(), jobs)
    hw = _stored_hw(root)
    records = []
    for a, b in graph.pairs():
        key = pair_key(a, b)
        if key not in mined:
            continue
        cs: list[Correspondence] = mined[key]
        rows = np.array([c.as_row() for c in cs], dtype=np.float64)
        corr = np.concatenate([ds.rescale_points(rows[:, :2], (size, size), hw[a]),
                               ds.rescale_points(rows[:, 2:], (size, size), hw[b])], axis=1)
        records.append(ds.PairRecord(a, b, key, corr, extra={
            "scales": [c.scale for c in cs], "confidences": [c.confidence for c in cs]}))
        if cfg.mining.overlays:
            (out / "overlays").mkdir(exist_ok=True)
            io.write_image(out / "overlays" / f"{key}.png", overlay_image(images[a], images[b], cs))
    ds.write_pairs(out / "pairs.jsonl", records)
    io.write_jsonl(out / "graph.jsonl", [{"source": i, "target": j} for i, j in graph.edges])
    return {"pairs": len(records), "correspondences": int(sum(len(r.correspondences) for r in records))}


def _encoder_samples(cfg: RunConfig) -> list[TrainSample]:
    root, size = cfg.data.path, cfg.data.image_size
    records = [r for r in ds.load_pairs(root) if len(r.correspondences)]
    hw = _stored_hw(root)
    ids = sorted({r.source for r in records} | {r.target for r in records})
    images = ds.load_images(root, size, ids)
    return [TrainSample(images[r.source], images[r.target],
                        ds.rescale_correspondences(r.correspondences, hw[r.source], hw[r.target], size),
                        pair_id=r.pair_id) for r in records]


def cmd_train_encoder(cfg: RunConfig, out: Path, jobs: int) -> dict:
    tcfg = cfg.encoder_train_config()
    if cfg.encoder.resume:
        backbone, meta, optim = load_backbone(cfg.encoder.resume)
        state = make_state(backbone, tcfg)
        state.optimizer.load_state_dict(optim)
        state.epoch, state.losses = int(meta["epoch"]), list(meta["losses"])
    else:
        backbone = Backbone(cfg.backbone_config(), rngmod.stream(cfg.seed, "backbone"))
        state = make_state(backbone, tcfg)
    samples = _encoder_samples(cfg) if state.epoch < tcfg.epochs else []
    if state.epoch < tcfg.epochs and not samples:
        raise ds.DatasetError(f"no pairs with correspondences in {cfg.data.path}/pairs.jsonl")
    while state.epoch < tcfg.epochs:
        train_epoch(state, samples, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "encoder", backbone, state.optimizer, {
        "kind": "encoder", "backbone": dataclasses.asdict(backbone.config), "epoch": state.epoch,
        "losses": state.losses, "image_size": cfg.data.image_size, "seed": cfg.seed})
    io.write_jsonl(out / "encoder_losses.jsonl", [{"epoch": i + 1, "loss": l} for i, l in enumerate(state.losses)])
    return {"epochs": state.epoch, "final_loss": state.losses[-1] if state.losses else None}


def cmd_train_flow(cfg: RunConfig, out: Path, jobs: int) -> dict:
    encoder = load_backbone(_require(cfg.encoder.checkpoint, "encoder.checkpoint", "train-flow"))[0]
    size = cfg.data.image_size
    fcfg = cfg.flow_train_config()
    if cfg.flow.resume:
        model, meta, optim = load_flow_model(cfg.flow.resume)
        start, history = int(meta["epoch"]), FlowHistory(**meta["history"])
    else:
        model, optim, start, history = make_flow_model(encoder, (size, size), cfg.flownet_config(), cfg.seed), None, 0, None
    opt = make_flow_optimizer(model, encoder, fcfg)
    if optim:
        opt.load_state_dict(optim)
    history = history or FlowHistory()
    if start < fcfg.epochs:
        samples = [FlowSample(s.source, s.target, s.correspondences, s.pair_id) for s in _encoder_samples(cfg)]
        if not samples:
            raise ds.DatasetError(f"no pairs with correspondences in {cfg.data.path}/pairs.jsonl")
        train_flownet(samples, encoder, model, fcfg, optimizer=opt, start_epoch=start, history=history)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "flow", model, opt, {
        "kind": "flow", "flownet": dataclasses.asdict(model.config), "feat_dim": model.feat_dim,
        "grid": list(model.grid), "image_size": size, "epoch": max(start, fcfg.epochs),
        "history": history.as_dict(), "seed": cfg.seed})
    if fcfg.joint_encoder:
        save_model(out / "encoder", encoder, None, {
            "kind": "encoder", "backbone": dataclasses.asdict(encoder.config), "epoch": 0, "losses": [],
            "image_size": size, "seed": cfg.seed})
    n = len(history.total)
    io.write_jsonl(out / "flow_losses.jsonl",
                   [{"epoch": i + 1, **{k: v[i] for k, v in history.as_dict().items()}} for i in range(n)])
    return {"epochs": n, "final_loss": history.total[-1] if n else None}


def _bilinear_map(fmap: np.ndarray, pts: np.ndarray) -> np.ndarray:
    from .synthetic import bilinear

    h, w = fmap.shape[:2]
    return bilinear(fmap.astype(np.float32), np.clip(pts[:, 0], 0, w - 1), np.clip(pts[:, 1], 0, h - 1)).astype(np.float64)


def cmd_match(cfg: RunConfig, out: Path, jobs: int) -> dict:
    root, size = cfg.data.path, cfg.data.image_size
    encoder = load_backbone(_require(cfg.encoder.checkpoint, "encoder.checkpoint", "match"))[0]
    model = None
    if cfg.match.mode == "flow":
        model = load_flow_model(_require(cfg.flow.checkpoint, "flow.checkpoint", "match (mode flow)"))[0]
    records = ds.load_pairs(root)
    if cfg.match.pairs is not None:
        wanted = set(cfg.match.pairs)
        unknown = sorted(wanted - {r.pair_id for r in records})
        if unknown:
            raise ds.DatasetError(f"unknown pair ids in match.pairs: {unknown}")
        records = [r for r in records if r.pair_id in wanted]
    hw = _stored_hw(root)
    out.mkdir(parents=True, exist_ok=True)
    stride = encoder.stride
    off = (stride - 1) / 2
    gx, gy = np.meshgrid(np.arange(size // stride) * stride + off, np.arange(size // stride) * stride + off)
    grid_pts = np.stack([gx.ravel(), gy.ravel()], -1)
    predictions = []
    for r in records:
        img_s, img_t = (io.read_image(ds.image_paths(root)[i], size) for i in (r.source, r.target))
        d = out / "match" / r.pair_id
        d.mkdir(parents=True, exist_ok=True)
        if model is None:
            with T.no_grad():
                f_s, f_t = extract_features(img_s, encoder), extract_features(img_t, encoder)
            transfer = lambda p: nn_match(f_s, f_t, p, stride)
        else:
            fwd = predict(model, encoder, img_s, img_t)
            fmap = dense_map(fwd)
            transfer = lambda p: _bilinear_map(fmap, p)
            gxx, gyy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
            io.save_tensor(d / "flow.msf", (fmap - np.stack([gxx, gyy], -1)).astype(np.float32))
            io.save_tensor(d / "theta.msf", fwd.theta.data)
            io.write_image(d / "warped.png", warp_image(img_t, fmap))
            seg = segment(model, encoder, img_s, img_t)
            io.write_image(d / "prob_source.png", seg.prob_source)
            io.write_image(d / "prob_target.png", seg.prob_target)
            io.write_image(d / "mask_source.png", seg.mask_source.astype(np.float32))
            io.write_image(d / "mask_target.png", seg.mask_target.astype(np.float32))
        pt = transfer(grid_pts)
        corr = np.concatenate([ds.rescale_points(grid_pts, (size, size), hw[r.source]),
                               ds.rescale_points(pt, (size, size), hw[r.target])], axis=1)
        io.write_jsonl(d / "correspondences.jsonl", [{"pair_id": r.pair_id, "correspondence": row.tolist()}
                                                     for row in corr])
        if r.keypoints:
            kp = ds.rescale_points(np.asarray(r.keypoints["source"], float), hw[r.source], (size, size))
            pred = ds.rescale_points(transfer(kp), (size, size), hw[r.target])
            predictions.append({"pair_id": r.pair_id, "points": pred.tolist()})
    io.write_jsonl(out / "predictions.jsonl", predictions)
    return {"pairs": len(records), "mode": cfg.match.mode}


def cmd_eval(cfg: RunConfig, out: Path, jobs: int) -> dict:
    path = _require(cfg.eval.predictions, "eval.predictions", "eval")
    preds = {row["pair_id"]: np.asarray(row["points"], float).reshape(-1, 2) for row in io.read_jsonl(path)}
    anns = ds.annotations(cfg.data.path)
    if not anns:
        raise EvalError(f"no keypoint annotations in {cfg.data.path}/pairs.jsonl")
    missing = [a.pair_id for a in anns if a.pair_id not in preds]
    if missing:
        raise EvalError(f"no prediction for pair {missing[0]}" + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    res = pck(anns, [preds[a.pair_id] for a in anns], tuple(cfg.eval.alphas), cfg.eval.convention, cfg.eval.unit_mode)
    out.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(out / "metrics.jsonl", pck_records(res))
    table = pck_table({"Ours": res})
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return {"pck": {str(a): v for a, v in res.values().items()}, "n": res.total}


def cmd_probe(cfg: RunConfig, out: Path, jobs: int) -> dict:
    encoder = load_backbone(_require(cfg.encoder.checkpoint, "encoder.checkpoint", "probe"))[0]
    pair_id = _require(cfg.probe.pair, "probe.pair", "probe")
    rec = {r.pair_id: r for r in ds.load_pairs(cfg.data.path)}.get(pair_id)
    if rec is None:
        raise ds.DatasetError(f"unknown pair id {pair_id!r}")
    images = ds.load_images(cfg.data.path, cfg.data.image_size)
    gray = float(np.mean([img.mean() for img in images.values()]))
    p = cfg.probe
    heat = receptive_field_probe(images[rec.source], images[rec.target], tuple(p.point_s), tuple(p.point_t),
                                 encoder, p.square_side, p.stride, gray=gray)
    out.mkdir(parents=True, exist_ok=True)
    io.save_tensor(out / "probe.msf", heat.astype(np.float32))
    span = float(np.abs(heat).max()) or 1.0
    io.write_image(out / "probe.png", np.clip(heat / span, 0, 1).astype(np.float32))
    return {"shape": list(heat.shape), "max_drop": float(heat.max())}


def cmd_report_weights(cfg: RunConfig, out: Path, jobs: int) -> dict:
    encoder = load_backbone(_require(cfg.encoder.checkpoint, "encoder.checkpoint", "report-weights"))[0]
    layers = encoder.msconv_layers()
    if not layers:
        raise ValueError("encoder has no multi-scale convolution layers")
    text = weight_report(layers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weights.txt").write_text(text + "\n")
    print(text)
    return {"layers": len(layers)}


HANDLERS = {
    "mine": cmd_mine, "train-encoder": cmd_train_encoder, "train-flow": cmd_train_flow, "match": cmd_match,
    "eval": cmd_eval, "probe": cmd_probe, "report-weights": cmd_report_weights,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser = argparse.ArgumentParser(prog="msflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _fail(kind: str, message: str, field: str | None = None, code: int = 1) -> int:
    err = {"error": kind, "message": message}
    if field is not None:
        err["field"] = field
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        validate(cfg)
        if args.jobs < 1:
            raise ConfigError("--jobs", f"must be at least 1, got {args.jobs}")
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.yaml").write_text(dump_config(cfg))
        summary = HANDLERS[args.command](cfg, args.out, args.jobs)
    except ConfigError as e:
        return _fail("ConfigError", str(e), e.field, code=2)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error record
        return _fail(type(e).__name__, str(e))
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
