"""Command-line front end.

Exit codes: 0 success, 2 unreadable or malformed input (bad flags, bad JSON),
3 input that parses but fails validation, 4 numeric failure (a gradient
check fails, a loss goes non-finite, scene generation gives up).

Settings are resolved as flags > run file (``--config``) > defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .aux_losses import FocalParams, NonFiniteLossError, heatmap_focal_loss, masked_bbox_loss
from .core import BBoxMaskError, Grid, Scene, SceneValidationError
from .disentangle import ConstantInit, OptConfig, OptimizationError, RandomInit, TrajectoryLog, optimize_embedding, similarity_snapshot
from .embedding import EmbeddingBatch, EmbParams, bbox_mask_loss, embedding_loss
from .evaluate import OksParams, Prediction, match_and_score, predictions_from_dict, predictions_to_dict
from .gradcheck import FDConfig, gradient_suite
from .heatmap import (
    DecodeParams,
    EncodeParams,
    decode_centers,
    encode_bbox_targets,
    encode_center_map,
    encode_keypoint_maps,
    group_keypoints,
    write_pgm,
)
from .synth import GenerationFailedError, SynthConfig, generate

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4

SECTIONS = {
    "synth": SynthConfig,
    "emb": EmbParams,
    "focal": FocalParams,
    "oks": OksParams,
    "decode": DecodeParams,
    "encode": EncodeParams,
    "fd": FDConfig,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run file


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise CliError(EXIT_VALIDATION, f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, f"{where}: {exc}") from None


class RunConfig:
    """Parameter sections from the run file with flag overrides applied."""

    def __init__(self, raw: dict | None = None, seed: int | None = None, out: str | None = None):
        raw = dict(raw or {})
        allowed = set(SECTIONS) | {"opt", "out_dir"}
        unknown = set(raw) - allowed
        if unknown:
            raise CliError(EXIT_VALIDATION, f"run file: unknown section(s) {sorted(unknown)}")
        self.sections = {k: dict(raw.get(k, {})) for k in SECTIONS}
        opt = dict(raw.get("opt", {}))
        init = dict(opt.pop("init", {"kind": "random"}))
        if seed is not None:
            self.sections["synth"]["seed"] = seed
            self.sections["fd"]["seed"] = seed
            if init.get("kind", "random") == "random":
                init["seed"] = seed
        self.opt_raw, self.init_raw = opt, init
        self.out_dir = Path(out if out is not None else raw.get("out_dir", "."))

    def get(self, name: str, **overrides):
        values = {**self.sections[name], **{k: v for k, v in overrides.items() if v is not None}}
        return _build(SECTIONS[name], values, name)

    def opt(self, emb: EmbParams, **overrides) -> OptConfig:
        init = dict(self.init_raw)
        kind = init.pop("kind", "random")
        if kind == "random":
            init_obj = _build(RandomInit, init, "opt.init")
        elif kind == "constant":
            init_obj = _build(ConstantInit, init, "opt.init")
        else:
            raise CliError(EXIT_VALIDATION, f"opt.init: unknown kind {kind!r}")
        values = {**self.opt_raw, **{k: v for k, v in overrides.items() if v is not None}}
        return _build(OptConfig, {**values, "init": init_obj, "emb_params": emb}, "opt")


# --------------------------------------------------------------------------
# file helpers


def _load_scene(path) -> Scene:
    try:
        return Scene.from_dict(_read_json(path))
    except (BBoxMaskError, TypeError, ValueError, KeyError, IndexError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(EXIT_VALIDATION, f"{path}: {exc}") from None


def _load_grid(path) -> Grid:
    try:
        return Grid.from_dict(_read_json(path))
    except (BBoxMaskError, TypeError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(EXIT_VALIDATION, f"{path}: {exc}") from None


def _json_text(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _grid_text(grid) -> str:
    g = grid if isinstance(grid, Grid) else Grid(grid)
    return json.dumps(g.to_dict()) + "\n"


class Outputs:
    """Collects output files and writes them only once everything succeeded."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.texts: dict[str, str] = {}
        self.pgms: dict[str, tuple] = {}
        self.failed: list[str] = []

    def text(self, name: str, content: str) -> None:
        self.texts[name] = content

    def pgm(self, name: str, grid, **kw) -> None:
        self.pgms[name] = (grid, kw)

    def commit(self) -> list[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, content in self.texts.items():
            path = self.out_dir / name
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(content)
            os.replace(tmp, path)
            written.append(path)
        for name, (grid, kw) in self.pgms.items():
            write_pgm(self.out_dir / name, grid, **kw)
            written.append(self.out_dir / name)
        return written


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: RunConfig) -> Outputs:
    synth = cfg.get("synth", num_instances=args.num_instances, overlap=args.overlap)
    scene = generate(synth)
    out = Outputs(cfg.out_dir)
    out.text(args.output, scene.to_json() + "\n")
    return out


def cmd_gradcheck(args, cfg: RunConfig) -> Outputs:
    fd = cfg.get("fd", trials=args.trials)
    emb = cfg.get("emb")
    ops = tuple(args.ops.split(",")) if args.ops else None
    try:
        reports = gradient_suite(fd, beta=emb.beta, metric=emb.metric, ops=ops)
    except KeyError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    out = Outputs(cfg.out_dir)
    for name, rep in reports.items():
        out.text(f"fd_{name}.json", rep.to_json() + "\n")
        _say(args, f"{name:22s} {'pass' if rep.passed else 'FAIL'}  checked={rep.checked} max_rel={rep.max_rel_err:.2e} max_abs={rep.max_abs_err:.2e}")
    out.failed = [n for n, r in reports.items() if not r.passed]
    return out


def loss_breakdown(scene: Scene, e_raw, emb: EmbParams, focal: FocalParams, encode: EncodeParams, center_pred=None, buk_pred=None, bbox_pred=None) -> dict:
    """Loss terms for one scene; terms without a prediction map are reported as 0."""
    batch = EmbeddingBatch(e_raw, scene, emb.epsilon)
    ae = bbox_mask_loss(batch, emb)
    emb_total = embedding_loss(batch, emb).value
    res = {
        "pull_in": ae.parts["pull_in"],
        "push_out": ae.parts["push_out"],
        "push_inst": ae.parts["push_inst"],
        "emb_total": emb_total,
        "focal_center": 0.0,
        "focal_buk": 0.0,
        "bbox": 0.0,
    }
    if center_pred is not None:
        res["focal_center"] = heatmap_focal_loss(center_pred, encode_center_map(scene, encode), focal).value
    if buk_pred is not None:
        res["focal_buk"] = heatmap_focal_loss(buk_pred, encode_keypoint_maps(scene, encode), focal).value
    if bbox_pred is not None:
        targets, mask = encode_bbox_targets(scene)
        res["bbox"] = masked_bbox_loss(bbox_pred, targets, mask).value
    res["total"] = res["emb_total"] + res["focal_center"] + res["focal_buk"] + res["bbox"]
    return res


def cmd_loss(args, cfg: RunConfig) -> Outputs:
    scene = _load_scene(args.scene)
    e_raw = _load_grid(args.embedding)
    preds = {k: _load_grid(getattr(args, k)) if getattr(args, k) else None for k in ("center_pred", "buk_pred", "bbox_pred")}
    emb = cfg.get("emb")
    if e_raw.channels != emb.dim:
        emb = _build(EmbParams, {**cfg.sections["emb"], "dim": e_raw.channels}, "emb")
    res = loss_breakdown(scene, e_raw, emb, cfg.get("focal"), cfg.get("encode"), **preds)
    out = Outputs(cfg.out_dir)
    out.text(args.output, _json_text(res))
    _say(args, json.dumps(res))
    return out


def cmd_optimize(args, cfg: RunConfig) -> Outputs:
    scene = _load_scene(args.scene)
    emb = cfg.get("emb", dim=args.dim)
    opt = cfg.opt(emb, steps=args.steps, lr=args.lr)
    e_norm, log = optimize_embedding(scene, opt)
    out = Outputs(cfg.out_dir)
    out.text("embedding.json", _grid_text(e_norm))
    out.text("trajectory.csv", log.to_csv())
    for inst in scene.instances:
        out.pgm(f"similarity_{inst.id}.pgm", similarity_snapshot(e_norm, scene, inst.id, emb), vmin=0.0, vmax=1.0)
    last = log.last
    _say(args, f"step {last['step']}: total={last['total']:.6f} pair_sim={last['pair_sim']:.4f} coherence={last['coherence']:.4f}")
    return out


def cmd_encode(args, cfg: RunConfig) -> Outputs:
    scene = _load_scene(args.scene)
    enc = cfg.get("encode")
    center = encode_center_map(scene, enc)
    kpts = encode_keypoint_maps(scene, enc)
    targets, mask = encode_bbox_targets(scene)
    out = Outputs(cfg.out_dir)
    out.text("center.json", _grid_text(center))
    out.text("keypoints.json", _grid_text(kpts))
    out.text("bbox_targets.json", _grid_text(targets))
    out.text("bbox_mask.json", _grid_text(mask))
    out.pgm("center.pgm", center, vmin=0.0, vmax=1.0)
    return out


def cmd_decode(args, cfg: RunConfig) -> Outputs:
    center = _load_grid(args.center)
    kpts = _load_grid(args.keypoints)
    e_norm = _load_grid(args.embedding) if args.embedding else None
    if center.shape[0] != 1 or center.shape[1:] != kpts.shape[1:]:
        raise CliError(EXIT_VALIDATION, f"center map {center.shape} and keypoint maps {kpts.shape} do not align")
    dec = cfg.get("decode")
    emb = cfg.get("emb")
    centers = decode_centers(center, dec)
    groups = group_keypoints(kpts, centers, e_norm, beta=emb.beta)
    preds = [Prediction(k, score) for k, (_, _, score) in zip(groups, centers)]
    out = Outputs(cfg.out_dir)
    out.text(args.output, _json_text(predictions_to_dict(preds, center.width, center.height)))
    _say(args, f"decoded {len(preds)} instance(s)")
    return out


def cmd_eval(args, cfg: RunConfig) -> Outputs:
    raw = _read_json(args.predictions)
    try:
        preds = predictions_from_dict(raw)
    except (BBoxMaskError, TypeError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, f"{args.predictions}: {exc}") from None
    scene = _load_scene(args.scene)
    try:
        report = match_and_score(preds, scene, cfg.get("oks"))
    except BBoxMaskError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    out = Outputs(cfg.out_dir)
    out.text(args.output, report.to_json() + "\n")
    _say(args, f"AP={report.ap:.4f} AR={report.ar:.4f}")
    return out


REPORT_HEADER = ("file", "steps", "initial_total", "final_total", "final_pull_in", "final_push_out", "final_push_inst", "final_pair_sim", "final_coherence", "final_bg_sep")


def cmd_report(args, cfg: RunConfig) -> Outputs:
    rows = []
    for path in args.trajectories:
        try:
            log = TrajectoryLog.read_csv(path)
        except OSError as exc:
            raise CliError(EXIT_PARSE, f"{path}: {exc.strerror}") from None
        except (ValueError, StopIteration) as exc:
            raise CliError(EXIT_VALIDATION, f"{path}: {exc}") from None
        if not log.rows:
            raise CliError(EXIT_VALIDATION, f"{path}: empty trajectory")
        first, last = log.first, log.last
        rows.append([path, last["step"], first["total"], last["total"], last["pull_in"], last["push_out"], last["push_inst"], last["pair_sim"], last["coherence"], last["bg_sep"]])
    lines = [",".join(REPORT_HEADER)]
    for r in rows:
        lines.append(",".join([str(r[0]), str(r[1])] + [repr(float(v)) for v in r[2:]]))
    out = Outputs(cfg.out_dir)
    out.text(args.output, "\n".join(lines) + "\n")
    _say(args, "\n".join(lines))
    return out


# --------------------------------------------------------------------------
# entry point


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_PARSE, f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="bboxmask", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scene")
    p.add_argument("--num-instances", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--output", default="scene.json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss gradient")
    p.add_argument("--trials", type=int)
    p.add_argument("--ops", help="comma-separated subset of operations")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("loss", parents=[common], help="loss breakdown for a scene and an embedding map")
    p.add_argument("scene")
    p.add_argument("embedding")
    p.add_argument("--center-pred")
    p.add_argument("--buk-pred")
    p.add_argument("--bbox-pred")
    p.add_argument("--output", default="loss.json")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("optimize", parents=[common], help="gradient descent on an embedding map")
    p.add_argument("scene")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("encode", parents=[common], help="encode heatmap and box targets for a scene")
    p.add_argument("scene")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="decode predictions from heatmaps")
    p.add_argument("center")
    p.add_argument("keypoints")
    p.add_argument("--embedding", help="normalized embedding map used to group keypoints")
    p.add_argument("--output", default="predictions.json")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="OKS AP/AR of predictions against a scene")
    p.add_argument("predictions")
    p.add_argument("scene")
    p.add_argument("--output", default="eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="summarize trajectory CSVs")
    p.add_argument("trajectories", nargs="+")
    p.add_argument("--output", default="report.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        raw = _read_json(args.config) if getattr(args, "config", None) else {}
        if not isinstance(raw, dict):
            raise CliError(EXIT_VALIDATION, "run file must hold a JSON object")
        cfg = RunConfig(raw, seed=getattr(args, "seed", None), out=getattr(args, "out", None))
        outputs = args.func(args, cfg)
        outputs.commit()
        if outputs.failed:
            print(f"gradient check failed: {', '.join(outputs.failed)}", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SceneValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GenerationFailedError, NonFiniteLossError, OptimizationError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BBoxMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
