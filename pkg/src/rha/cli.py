"""Command-line entry points: train, eval, gradcheck, relate, synth.

Every command prints one JSON document on stdout and exits 0 on success, 1 on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import SyntheticConfig, evaluate, generate_synthetic, ground_truths, load_manifest, save_dataset
from .geometry import BoundingBox, classify_spatial_relation
from .model import forward, instance_loss, module_of, prepare, profile, random_params
from .training import TrainConfig, check_dims, load_checkpoint, run_training

log = logging.getLogger("rha")

GRADCHECK_TOL = 1e-4
GRADCHECK_SHAPE = dict(T=4, N_o=3, L_q=6, L_s=4)


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=1)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.out:
        cfg.out_dir = args.out
    out = run_training(cfg)
    rows = (out / "losses.csv").read_text().splitlines()
    _emit({"checkpoint": str(out / "checkpoint.json"), "log": str(out / "losses.csv"),
           "epochs": len(rows) - 1, "last": dict(zip(rows[0].split(","), rows[-1].split(",")))})
    return 0


def cmd_eval(args) -> int:
    params, dims, cfg = load_checkpoint(args.ckpt)
    dataset = load_manifest(args.data)
    check_dims(dims, dataset.dims)
    max_len = cfg.get("max_span_len")
    preds, rows = [], []
    with nx.no_grad():
        for inst in dataset.instances:
            out = forward(params, prepare(inst), dims, max_span_len=max_len)
            preds.append((out.answer, out.span))
            rows.append({"id": inst.id, "answer": out.answer, "span": [out.span.start, out.span.end],
                         "answer_probs": out.answer_probs.data.tolist()})
    gts = ground_truths(dataset.instances)
    metrics = evaluate(preds, gts)
    if args.report_dir:
        _write_eval_report(Path(args.report_dir), rows, preds, gts)
    _emit({"metrics": metrics.as_dict(), "predictions": rows})
    return 0


def _write_eval_report(directory: Path, rows, preds, gts) -> None:
    from .geometry import temporal_iou
    from .plotting import plot_spans

    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("id,answer,gt_answer,span_start,span_end,gt_start,gt_end,temporal_iou\n")
        for r, (pa, ps), (ga, gs) in zip(rows, preds, gts):
            fh.write(f"{r['id']},{pa},{ga},{ps.start},{ps.end},{gs.start},{gs.end},{temporal_iou(ps, gs)!r}\n")
    plot_spans([r["id"] for r in rows], [p[1] for p in preds], [g[1] for g in gts],
               [p[0] == g[0] for p, g in zip(preds, gts)], directory / "spans.png")


def gradcheck_report(seed: int, eps: float = nx.FD_STEP) -> dict:
    """Finite-difference check of every parameter tensor of a random reduced model on a toy instance."""
    dims = profile("reduced")
    ds = generate_synthetic(SyntheticConfig(num_instances=1, seed=seed, **GRADCHECK_SHAPE,
                                            **dims.inputs()))
    prep = prepare(ds.instances[0])
    params = random_params(dims, seed)
    names = list(params)
    errors = nx.relative_errors(lambda: instance_loss(forward(params, prep, dims), prep).total,
                                [params[k] for k in names], eps)
    groups = {k: e for k, e in zip(names, errors)}
    modules: dict[str, float] = {}
    for k, e in groups.items():
        m = module_of(k)
        modules[m] = max(modules.get(m, 0.0), e)
    worst = max(errors)
    return {"seed": seed, "eps": eps, "tolerance": GRADCHECK_TOL, "max_relative_error": worst,
            "passed": worst < GRADCHECK_TOL, "modules": modules, "groups": groups}


def cmd_gradcheck(args) -> int:
    if args.dims != "reduced":
        raise ValueError("gradcheck runs on the reduced dims profile only")
    report = gradcheck_report(args.seed, args.eps)
    _emit(report)
    return 0 if report["passed"] else 1


def relation_table(boxes: list[BoundingBox], frame_diag: float) -> list[dict]:
    rows = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i != j:
                rows.append({"i": i, "j": j, "class": classify_spatial_relation(a, b, frame_diag)})
    return rows


def cmd_relate(args) -> int:
    doc = json.loads(Path(args.boxes).read_text())
    if isinstance(doc, list):
        doc = {"boxes": doc}
    w, h = doc.get("frame_size", (640.0, 360.0))
    boxes = [BoundingBox.of(b) for b in doc["boxes"]]
    _emit({"frame_size": [w, h], "relations": relation_table(boxes, float(np.hypot(w, h)))})
    return 0


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(num_instances=args.num, T=args.frames, N_o=args.objects, L_q=args.hyp_len,
                          L_s=args.sub_len, seed=args.seed, signal=args.signal, **profile(args.dims).inputs())
    ds = generate_synthetic(cfg)
    manifest = save_dataset(ds, args.out, compress=args.gzip)
    _emit({"manifest": str(manifest), "instances": len(ds.instances), **ds.meta})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rha", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", help="also write predictions.csv and spans.png here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full reduced model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=nx.FD_STEP)
    p.add_argument("--dims", default="reduced")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("relate", help="spatial relation class of every ordered box pair")
    p.add_argument("--boxes", required=True)
    p.set_defaults(func=cmd_relate)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=32)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--hyp-len", type=int, default=6)
    p.add_argument("--sub-len", type=int, default=4)
    p.add_argument("--signal", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="reduced")
    p.add_argument("--gzip", action="store_true")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, IndexError) as exc:
        _emit({"error": f"{type(exc).__name__}: {exc}"})
        return 1


if __name__ == "__main__":
    sys.exit(main())
