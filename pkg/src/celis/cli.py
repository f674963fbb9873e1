"""Command-line entry point: ``celis <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Errors go to
standard error as one line of JSON.  ``CELIS_THREADS`` caps the number of
BLAS threads (default 1, which keeps floating-point results reproducible).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import load_config
from .descriptor import CENTER_BASED, PAIRWISE, DescriptorType, sample_descriptor_type
from .energy import EnergyModel, FeatureProvider, HandcraftedFeatures, init_model
from .engine import EnergyEngine, MergeEntry, MergeLog
from .io import load_volume, save_volume
from .metrics import contingency, evaluate_segmentation, variation_of_information
from .pipeline import candidate_thresholds, threshold_sweep
from .synthetic import SceneSpec, generate_synthetic_scene
from .training import (ExampleSet, balance_classes, expert_rollout, extract_examples,
                       sampled_examples, train_energy_model)
from .watershed import WatershedParams, oversegment


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # let thresholds such as -inf or -1e-3 through as values
        self._negative_number_matcher = re.compile(
            r"^-(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$|^-inf(inity)?$", re.IGNORECASE)

    def error(self, message):
        raise UsageError(message)


def _clean(obj):
    """Make ``obj`` strict-JSON safe (infinities become strings)."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else "-inf" if obj < 0 else "nan"
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _emit(obj) -> None:
    print(json.dumps(_clean(obj), sort_keys=True))


def _threshold(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


# ---------------------------------------------------------------------- loaders


def _load_types(path) -> list[DescriptorType]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [DescriptorType.from_dict(d) for d in data]


def _provider(args, shape=None) -> FeatureProvider:
    if getattr(args, "features", None):
        prov = FeatureProvider(load_volume(args.features))
    elif getattr(args, "affinities", None):
        prov = HandcraftedFeatures(load_volume(args.affinities))
    else:
        raise UsageError("need --affinities or --features")
    if shape is not None and tuple(prov.shape) != tuple(shape):
        raise ValueError(f"feature volume shape {prov.shape} does not match {tuple(shape)}")
    return prov


def _load_log(path) -> MergeLog:
    return MergeLog.from_jsonl(Path(path).read_text())


# ---------------------------------------------------------------------- commands


def cmd_synth(args):
    if args.spec:
        spec = SceneSpec.from_json(Path(args.spec).read_text())
    else:
        spec = SceneSpec(shape=tuple(args.shape), seed=args.seed, noise=args.noise,
                         split_rate=args.split_rate, n_objects=args.objects)
    gt, aff, sv = generate_synthetic_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(out / "gt.raw", gt.astype(np.uint32))
    save_volume(out / "aff.raw", aff.astype(np.float32))
    save_volume(out / "sv.raw", sv.astype(np.uint32))
    (out / "scene.json").write_text(spec.to_json() + "\n")
    _emit({"out": str(out), "ground_truth_segments": int(gt.max()),
           "supervoxels": int(sv.max()), "shape": list(spec.shape)})


def cmd_oversegment(args):
    params = WatershedParams(args.t_high, args.t_low, args.t_edge, args.t_size)
    if args.config:
        params = load_config(args.config).watershed.params()
    aff = load_volume(args.affinities)
    sv = oversegment(aff, params)
    save_volume(args.out, sv.astype(np.uint32))
    _emit({"out": args.out, "supervoxels": int(sv.max())})


def cmd_make_descriptors(args):
    if args.config:
        types = load_config(args.config).descriptor_objects()
    else:
        if args.kind is None or args.bbox_size is None:
            raise UsageError("need --config or both --kind and --bbox-size")
        types = [sample_descriptor_type(args.seed, args.kind, args.bbox_size, args.k,
                                        args.region_size, args.zone_size, args.type_id)]
    Path(args.out).write_text(json.dumps([t.to_dict() for t in types]) + "\n")
    _emit({"out": args.out, "types": [{"id": t.id, "kind": t.kind, "bbox_size": t.bbox_size,
                                       "k": t.k, "region_size": t.region_size} for t in types]})


def cmd_extract_examples(args):
    types = _load_types(args.descriptors)
    n = len(args.supervoxels)
    if len(args.ground_truth) != n or len(args.affinities) != n:
        raise UsageError("give one --ground-truth and --affinities per --supervoxels")
    samplers = None
    n_features = None
    for i, (svp, gtp, affp) in enumerate(zip(args.supervoxels, args.ground_truth, args.affinities)):
        sv = load_volume(svp).astype(np.int64)
        gt = load_volume(gtp).astype(np.int64)
        prov = HandcraftedFeatures(load_volume(affp))
        n_features = prov.dim
        samplers = extract_examples(sv, gt, types, prov, m=args.samples, seed=args.seed + i,
                                    state_stride=args.state_stride, samplers=samplers)
    sets = sampled_examples(samplers, types, n_features)
    written = {}
    for ti, ex in sets.items():
        path = f"{args.out}.type{types[ti].id}.bin"
        ex.meta = {"descriptor_type": types[ti].id, "volumes": n}
        ex.save(path)
        written[str(types[ti].id)] = {"path": path, "examples": len(ex),
                                      "helpful": int((ex.y < 0).sum()), "harmful": int((ex.y > 0).sum())}
    _emit({"written": written})


def cmd_train(args):
    sets = [ExampleSet.load(p) for p in args.examples]
    ex = balance_classes(ExampleSet.concat(sets))
    model = init_model(ex.k, ex.features.shape[1], hidden=args.hidden, seed=args.seed,
                       dropout=args.dropout)
    result = train_energy_model(model, ex, args.loss, lr=args.lr, epochs=args.epochs,
                                batch=args.batch, seed=args.seed)
    result.model.save(args.out)
    if args.curve:
        result.write_curve(args.curve)
    _emit({"out": args.out, "examples": len(ex), "final_loss": result.losses[-1]})


def _engine(args):
    sv = load_volume(args.supervoxels).astype(np.int64)
    types = _load_types(args.descriptors)
    models = [EnergyModel.load(p) for p in args.models]
    if len(models) != len(types):
        raise UsageError(f"{len(types)} descriptor types but {len(models)} models")
    return sv, EnergyEngine(sv, types, models, _provider(args, sv.shape))


def _counter_summary(c: dict) -> dict:
    steps = c["per_step"]
    worst = max((s["descriptors"] / s["naive_descriptors"] for s in steps if s["naive_descriptors"]),
                default=0.0)
    naive = c["naive_descriptors"]
    return {
        "descriptors_computed": c["descriptors_computed"],
        "model_evals": c["model_evals"],
        "naive_descriptors": naive,
        "fraction_of_naive": c["descriptors_computed"] / naive if naive else 0.0,
        "worst_step_fraction": worst,
        "pruned": c["pruned"],
        "steps": len(steps) - 1,
    }


def cmd_agglomerate(args):
    threshold, max_steps = args.threshold, args.max_steps
    if args.config:
        cfg = load_config(args.config)
        threshold, max_steps = cfg.threshold, cfg.max_steps
    sv, engine = _engine(args)
    log = engine.run_agglomeration(threshold, max_steps)
    Path(args.log).write_text(log.to_jsonl())
    counters = engine.counters.to_dict()
    if args.counters:
        Path(args.counters).write_text(json.dumps(_clean(counters), sort_keys=True) + "\n")
    if args.out:
        save_volume(args.out, engine.segment_labels().astype(np.uint32))
    _emit({"merges": len(log.entries), "initial_energy": log.initial_energy,
           "final_energy": engine.energy(), "log": args.log})


def cmd_counters(args):
    if args.counters:
        c = json.loads(Path(args.counters).read_text())
    else:
        if not (args.supervoxels and args.descriptors and args.models):
            raise UsageError("need --counters, or --supervoxels, --descriptors and --models")
        _, engine = _engine(args)
        engine.run_agglomeration(args.threshold, args.max_steps)
        c = engine.counters.to_dict()
    _emit(_counter_summary(c))


def cmd_evaluate(args):
    if args.log and not args.supervoxels:
        raise UsageError("--log needs --supervoxels")
    if not args.log and not args.segmentation:
        raise UsageError("need --segmentation, or --log with --supervoxels")
    gt = load_volume(args.ground_truth).astype(np.int64)
    if args.log:
        sv = load_volume(args.supervoxels).astype(np.int64)
        log = _load_log(args.log)
        taus = args.thresholds if args.thresholds else candidate_thresholds(log)
        _emit(threshold_sweep(log, sv, gt, taus))
        return
    seg = load_volume(args.segmentation).astype(np.int64)
    _emit(evaluate_segmentation(seg, gt))


def cmd_oracle(args):
    sv = load_volume(args.supervoxels).astype(np.int64)
    gt = load_volume(args.ground_truth).astype(np.int64)
    steps = expert_rollout(sv, gt)
    vi = variation_of_information(contingency(sv, gt))
    log = MergeLog(initial_energy=vi)
    for t, s in enumerate(steps):
        vi += s.delta
        log.entries.append(MergeEntry(t, s.sv_pair, s.delta, vi))
    Path(args.log).write_text(log.to_jsonl())
    final = log.replay(sv)
    if args.out:
        save_volume(args.out, final.astype(np.uint32))
    _emit({"merges": len(steps), "log": args.log, **evaluate_segmentation(final, gt)})


def cmd_replay(args):
    sv = load_volume(args.supervoxels).astype(np.int64)
    log = _load_log(args.log)
    labels = log.replay(sv, args.threshold)
    save_volume(args.out, labels.astype(np.uint32))
    _emit({"out": args.out, "merges": len(log.prefix(args.threshold)),
           "segments": int(np.unique(labels[labels > 0]).size)})


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="celis", description="Learned shape energies for supervoxel agglomeration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--spec")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--split-rate", type=float, default=3.0)
    s.add_argument("--objects", type=int, default=12)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("oversegment", help="watershed oversegmentation of an affinity volume")
    s.add_argument("--affinities", required=True)
    s.add_argument("--t-high", type=float, default=0.99)
    s.add_argument("--t-low", type=float, default=0.3)
    s.add_argument("--t-edge", type=float, default=0.1)
    s.add_argument("--t-size", type=int, default=25)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_oversegment)

    s = sub.add_parser("make-descriptors", help="sample descriptor types")
    s.add_argument("--config")
    s.add_argument("--kind", choices=[PAIRWISE, CENTER_BASED])
    s.add_argument("--bbox-size", type=int)
    s.add_argument("--k", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--region-size", type=int)
    s.add_argument("--zone-size", type=int, default=8)
    s.add_argument("--type-id", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_descriptors)

    s = sub.add_parser("extract-examples", help="sample training examples from expert rollouts")
    s.add_argument("--supervoxels", action="append", required=True)
    s.add_argument("--ground-truth", action="append", required=True)
    s.add_argument("--affinities", action="append", required=True)
    s.add_argument("--descriptors", required=True)
    s.add_argument("--samples", type=int, default=200_000)
    s.add_argument("--state-stride", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix; one file per descriptor type")
    s.set_defaults(func=cmd_extract_examples)

    s = sub.add_parser("train", help="train one energy model")
    s.add_argument("--examples", nargs="+", required=True)
    s.add_argument("--hidden", type=int, default=512)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--loss", choices=["log", "signed_linear"], default="log")
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--curve")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    def engine_args(s, required=True):
        s.add_argument("--supervoxels", required=required)
        s.add_argument("--affinities")
        s.add_argument("--features")
        s.add_argument("--descriptors", required=required)
        s.add_argument("--models", nargs="+", required=required)
        s.add_argument("--threshold", type=_threshold, default=0.0)
        s.add_argument("--max-steps", type=int)

    s = sub.add_parser("agglomerate", help="greedy energy-driven agglomeration")
    engine_args(s)
    s.add_argument("--config")
    s.add_argument("--log", required=True)
    s.add_argument("--counters")
    s.add_argument("--out")
    s.set_defaults(func=cmd_agglomerate)

    s = sub.add_parser("evaluate", help="VI and Rand F1, or a threshold sweep over a merge log")
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--segmentation")
    s.add_argument("--log")
    s.add_argument("--supervoxels")
    s.add_argument("--thresholds", type=_threshold, nargs="+")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("oracle", help="greedy VI-optimal agglomeration against ground truth")
    s.add_argument("--supervoxels", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("replay", help="labels from a merge log truncated at a threshold")
    s.add_argument("--supervoxels", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--threshold", type=_threshold, default=math.inf)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("counters", help="pruning statistics")
    engine_args(s, required=False)
    s.add_argument("--counters", help="counters JSON written by agglomerate")
    s.set_defaults(func=cmd_counters)
    return p


def _threads() -> int:
    raw = os.environ.get("CELIS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CELIS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CELIS_THREADS must be a positive integer, got {raw!r}")
    return n


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        return _fail("usage", exc, 2)
    try:
        with threadpool_limits(limits=threads):
            args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except Exception as exc:  # reported, not re-raised: the CLI contract is exit code + JSON
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
