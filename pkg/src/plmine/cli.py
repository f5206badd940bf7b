"""Command-line interface: ``plmine {mine,eval-pl,fuse-pl,train-toy,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .benchmark import BenchmarkConfig
from .evaluation import evaluate
from .experiments import ALPHA_SWEEP, ExperimentConfig, ovd_experiment, ssod_experiment
from .io import (BUNDLED_CORPUS, BUNDLED_LABELSPACE, DetectionDataset, RunManifest, file_sha256, load_candidates,
                 load_coco_json, load_pseudo_labels, read_json, save_candidates, save_pseudo_labels, write_json)
from .losses import TrainConfig
from .miner import MinerBackends, MinerConfig, merge_teacher_pls, mine_dataset
from .proposals import IdentityRefiner, ProposalFileSource
from .report import write_report
from .scoring import LabelSpace, PrecomputedBackend
from .synthetic import ContractionRefiner, OracleBackend, SyntheticProposalSource

log = logging.getLogger("plmine")

EXIT_OK, EXIT_FATAL, EXIT_USAGE = 0, 1, 2


class CliError(RuntimeError):
    pass


def _resolve(path: str, bundled) -> Path:
    return Path(bundled) if path == "bundled" else Path(path)


def _load_labelspace(path: Path) -> LabelSpace:
    return LabelSpace.from_dict(read_json(path))


def _miner_config(args) -> MinerConfig:
    cfg = MinerConfig()
    if args.config:
        d = read_json(args.config)
        d = d.get("miner", d)
        cfg = MinerConfig.from_dict(d)
    overrides = {}
    for name in ("tau", "roi_steps", "top_k", "rpn_nms", "pl_nms", "nms_mode", "max_over", "gate", "temperature"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if args.no_fusion:
        overrides["fusion_enabled"] = False
    return replace(cfg, **overrides)


def _build_backends(args, dataset: DetectionDataset, labelspace: LabelSpace, inputs: dict):
    if args.backend == "oracle":
        bench = BenchmarkConfig()
        vocab = [n for _, n in dataset.categories]
        vocab += [n for n in labelspace.entry_names if n not in vocab and n != "background"]
        noise = bench.scorer_noise if args.noise is None else args.noise
        scorer = OracleBackend(vocab, noise, bench.scorer_temperature, args.seed, bench.scorer_background_weight)
        backends = MinerBackends(SyntheticProposalSource(bench.rpn), scorer, ContractionRefiner(bench.refiner))
        return dataset.to_scenes(), backends
    from .live import ImageItem
    if not args.proposals:
        raise CliError(f"--backend {args.backend} needs --proposals")
    inputs[str(args.proposals)] = file_sha256(args.proposals)
    source = ProposalFileSource(read_json(args.proposals))
    root = Path(args.dataset).parent
    items = [ImageItem(im.id, im.extent, root / im.file_name if im.file_name else None) for im in dataset.images]
    if args.backend == "precomputed":
        if not args.embeddings:
            raise CliError("--backend precomputed needs --embeddings")
        inputs[str(args.embeddings)] = file_sha256(args.embeddings)
        scorer = PrecomputedBackend.load(args.embeddings)
    else:
        from .live import ClipBackend
        scorer = ClipBackend()
    return items, MinerBackends(source, scorer, IdentityRefiner())


def cmd_mine(args) -> int:
    ds_path = _resolve(args.dataset, BUNDLED_CORPUS)
    ls_path = _resolve(args.labelspace, BUNDLED_LABELSPACE)
    dataset = load_coco_json(ds_path)
    labelspace = _load_labelspace(ls_path)
    config = _miner_config(args)
    inputs = {str(ds_path): file_sha256(ds_path), str(ls_path): file_sha256(ls_path)}
    if args.config:
        inputs[str(args.config)] = file_sha256(args.config)
    items, backends = _build_backends(args, dataset, labelspace, inputs)
    result = mine_dataset(items, labelspace, backends, config, workers=args.workers,
                          candidates_only=args.candidates_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = "candidates.json" if args.candidates_only else "pseudo_labels.json"
    if args.candidates_only:
        save_candidates(out / name, result.pseudo_labels)
    else:
        save_pseudo_labels(out / name, result.pseudo_labels)
    manifest = RunManifest(
        command="mine", config=config.to_dict(), seed=args.seed, labelspace=labelspace.to_dict(),
        backends={"source": type(backends.source).__name__, "scorer": backends.scorer.identifier,
                  "refiner": type(backends.refiner).__name__, "kind": args.backend},
        inputs=inputs, outputs={name: file_sha256(out / name)},
        stats={"n_images": result.n_images, "n_records": len(result.pseudo_labels),
               "failures": {str(k): v for k, v in result.failures.items()}, "workers": args.workers})
    manifest.save(out / "manifest.json")
    print(f"{len(result.pseudo_labels)} records from {result.n_images} images -> {out / name}")
    if result.failures:
        log.warning("%d of %d images failed (rate %.3f)", len(result.failures), result.n_images,
                    result.failure_rate)
        if result.failure_rate > args.max_failure_rate:
            print(f"error: failure rate {result.failure_rate:.3f} exceeds {args.max_failure_rate}", file=sys.stderr)
            return EXIT_FATAL
    return EXIT_OK


def cmd_eval_pl(args) -> int:
    dataset = load_coco_json(_resolve(args.dataset, BUNDLED_CORPUS))
    pls = load_pseudo_labels(args.pls)
    if args.novel:
        novel = [int(x) for x in args.novel.split(",")]
    elif args.labelspace:
        novel = _load_labelspace(_resolve(args.labelspace, BUNDLED_LABELSPACE)).target_ids
    else:
        novel = [c for c, _ in dataset.categories]
    proposals = None
    if args.proposals:
        from .evaluation import Detection
        from .geometry import BBox
        proposals = [Detection(r["image_id"], -1, BBox.from_xywh(r["bbox"]), float(r["score"]))
                     for r in read_json(args.proposals)]
    report = evaluate(pls, dataset.ground_truth(), novel, dataset.image_ids, proposals=proposals,
                      max_dets=args.max_dets)
    print(report.render_table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_fuse_pl(args) -> int:
    vl = load_candidates(args.vl)
    teacher = load_candidates(args.teacher)
    config = _miner_config(args)
    cats = None
    if args.labelspace:
        cats = _load_labelspace(_resolve(args.labelspace, BUNDLED_LABELSPACE)).target_ids
    pls = merge_teacher_pls(vl, teacher, config, cats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pseudo_labels(args.out, pls)
    n_t = sum(p.source == "teacher" for p in pls)
    print(f"{len(pls)} pseudo labels ({len(pls) - n_t} vl, {n_t} teacher) -> {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    train = replace(ExperimentConfig().train, steps=args.steps)
    if args.tau is not None:
        train = replace(train, tau=args.tau)
    config = ExperimentConfig(seed=args.seed, train=train)
    if args.experiment == "ovd":
        alphas = [float(a) for a in args.alpha.split(",")] if args.alpha else ALPHA_SWEEP
        res = ovd_experiment(config, alphas)
    else:
        if args.alpha:
            config = replace(config, train=replace(train, alpha=float(args.alpha)))
        res = ssod_experiment(config)
    payload = dict(res)
    payload["experiment"] = args.experiment
    payload["runs"] = {k: v.to_dict() for k, v in res["runs"].items()}
    for name, run in payload["runs"].items():
        print(f"{name:<14} novel AP50 {100 * run['novel_ap50']:5.1f}  AP50 {100 * run['ap50']:5.1f}  "
              f"mAP {100 * run['mAP']:5.1f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, payload)
    return EXIT_OK


def cmd_report(args) -> int:
    ds_path = _resolve(args.dataset, BUNDLED_CORPUS)
    dataset = load_coco_json(ds_path)
    pls = load_pseudo_labels(args.pls)
    ev = None
    if args.eval:
        from .evaluation import EvalReport
        ev = EvalReport.from_dict(read_json(args.eval))
    training = read_json(args.train) if args.train else None
    hashes = write_report(args.out, dataset, pls, ev, training, image_root=ds_path.parent,
                          max_images=args.max_images)
    write_json(Path(args.out) / "manifest.json",
               {"command": "report", "inputs": {str(ds_path): file_sha256(ds_path),
                                                str(args.pls): file_sha256(args.pls)},
                "outputs": hashes})
    print(f"report with {len(hashes)} files -> {Path(args.out) / 'index.html'}")
    return EXIT_OK


def _add_miner_flags(p: argparse.ArgumentParser, full: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with MinerConfig fields (flags override it)")
    p.add_argument("--tau", type=float)
    p.add_argument("--pl-nms", dest="pl_nms", type=float)
    p.add_argument("--nms-mode", dest="nms_mode", choices=("classwise", "class_agnostic"))
    p.add_argument("--gate", choices=("fused", "class_prob"))
    if full:
        p.add_argument("--roi-steps", dest="roi_steps", type=int)
        p.add_argument("--top-k", dest="top_k", type=int)
        p.add_argument("--rpn-nms", dest="rpn_nms", type=float)
        p.add_argument("--max-over", dest="max_over", choices=("full", "targets"))
        p.add_argument("--temperature", type=float)
    p.add_argument("--no-fusion", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plmine", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="mine pseudo labels over a dataset")
    p.add_argument("--dataset", required=True, help="COCO JSON, or 'bundled' for the synthetic corpus")
    p.add_argument("--labelspace", required=True, help="label-space JSON, or 'bundled'")
    p.add_argument("--backend", choices=("oracle", "precomputed", "live"), default="oracle")
    p.add_argument("--proposals", type=Path, help="proposal records (precomputed/live backends)")
    p.add_argument("--embeddings", type=Path, help="precomputed embedding container")
    p.add_argument("--noise", type=float, help="oracle scorer noise")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="oracle noise key")
    p.add_argument("--candidates-only", action="store_true", help="write pre-threshold candidates")
    p.add_argument("--max-failure-rate", type=float, default=0.1)
    p.add_argument("--out", required=True, help="output directory")
    _add_miner_flags(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("eval-pl", help="evaluate pseudo labels against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pls", required=True, type=Path)
    p.add_argument("--novel", help="comma-separated novel category ids")
    p.add_argument("--labelspace", help="take novel categories from this label space's targets")
    p.add_argument("--proposals", type=Path, help="proposal records for AR@N")
    p.add_argument("--max-dets", dest="max_dets", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval_pl)

    p = sub.add_parser("fuse-pl", help="merge VL and teacher candidates into pseudo labels")
    p.add_argument("--vl", required=True, type=Path)
    p.add_argument("--teacher", required=True, type=Path)
    p.add_argument("--labelspace")
    p.add_argument("--out", required=True, type=Path)
    _add_miner_flags(p, full=False)
    p.set_defaults(func=cmd_fuse_pl)

    p = sub.add_parser("train-toy", help="toy student experiment")
    p.add_argument("--experiment", choices=("ovd", "ssod"), default="ovd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=TrainConfig().steps)
    p.add_argument("--alpha", help="comma-separated alphas (ovd) or a single alpha (ssod)")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("report", help="render PNG overlays and an HTML summary")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pls", required=True, type=Path)
    p.add_argument("--eval", type=Path, help="EvalReport JSON from eval-pl")
    p.add_argument("--train", type=Path, help="train-toy JSON")
    p.add_argument("--max-images", dest="max_images", type=int, default=24)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        log.debug("fatal", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
