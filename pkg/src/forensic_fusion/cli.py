"""Command-line entry point.

Exit codes: 0 success, 1 partial failure (some samples or checks failed),
2 usage error (bad flags or missing input files).
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .agent import (
    LiveClient,
    Mode,
    PipelineConfig,
    PipelineError,
    ScriptedClient,
    load_guidelines,
    run_pipeline,
)
from .benchmark import StratPlan, conflict_vector, stratified_sample
from .clustering import AUTO_K_RANGE
from .core import FeatureStore, read_manifest
from .evaluation import EvalSummary, summarize_reports
from .experts import PanelConfig, ReplayTable
from .profiling import build_profiles, score_table_from_files
from .report import ReportFormat, emit, parse_report
from .simulator import PanelSpec, generate_panel
from .store import ProfileStore, canonical_json

logger = logging.getLogger("forensic_fusion")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _parse_k(value: str | None):
    if value is None:
        return None
    if value == "auto":
        return "auto"
    out = {}
    for part in value.split(","):
        modality, _, k = part.partition("=")
        if not k:
            raise UsageError(f"--k expects 'auto' or modality=K pairs, got {value!r}")
        out[modality.strip()] = "auto" if k.strip() == "auto" else int(k)
    return out


def _replay(args, panel: PanelConfig) -> ReplayTable:
    if args.scores:
        return ReplayTable.from_files([_require(p, "score manifest") for p in args.scores])
    targets = sorted({str(r.adapter.target) for r in panel.experts if r.adapter.kind.value == "replay"})
    return ReplayTable.from_files([_require(t, "replay manifest") for t in targets])


def _feature_store(manifest_path: Path, manifest) -> FeatureStore:
    return FeatureStore(manifest_path.parent, manifest.feature_dims)


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = PanelSpec.load(_require(args.spec, "simulator spec")) if args.spec else default_spec()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_samples is not None:
        overrides["n_samples"] = args.n_samples
    if overrides:
        spec = PanelSpec.from_dict({**spec.to_dict(), **overrides})
    sim = generate_panel(spec, name=args.name)
    paths = sim.write(args.out)
    print(f"wrote {len(sim.ids)} simulated samples to {args.out} (seed {spec.seed})")
    logger.debug("artifacts: %s", {k: str(v) for k, v in paths.items()})
    return EXIT_OK


def default_spec() -> PanelSpec:
    return PanelSpec(
        accuracy=((0.95, 0.6), (0.9, 0.55), (0.6, 0.95), (0.55, 0.9)),
        gamma=(0.5, 1.0, 2.0, 3.0),
        n_samples=2000,
    )


def cmd_profile_build(args) -> int:
    panel_path = _require(args.panel, "panel file (--panel)")
    train_path = _require(args.train, "train manifest (--train)")
    val_path = _require(args.val, "val manifest (--val)")
    panel = PanelConfig.load(panel_path)
    train_m, val_m = read_manifest(train_path), read_manifest(val_path)
    replay = _replay(args, panel)
    try:
        train = score_table_from_files(train_m, replay, panel.expert_ids, _feature_store(train_path, train_m))
        val = score_table_from_files(val_m, replay, panel.expert_ids, _feature_store(val_path, val_m))
    except KeyError as exc:
        raise UsageError(f"score manifest lacks an entry: {exc}") from exc
    descriptions = {r.expert_id: r.desc_text for r in panel.experts}
    experts, clusterings = build_profiles(train, val, descriptions, _parse_k(args.k), args.seed)
    store = ProfileStore(args.out)
    for p in experts.values():
        store.save_expert(p)
    for p in clusterings.values():
        store.save_clustering(p)
    panel.save(store.panel_path)
    meta = {"seed": args.seed, "experts": sorted(experts), "modalities": sorted(clusterings)}
    (Path(args.out) / "store.json").write_text(canonical_json(meta), encoding="utf-8")
    print(f"profiled {len(experts)} experts and {len(clusterings)} modalities into {args.out}")
    return EXIT_OK


def cmd_profile_validate(args) -> int:
    root = _require(args.profiles, "profile store (--profiles)")
    problems = ProfileStore(root).validate()
    for p in problems:
        print(f"problem: {p}")
    print("store ok" if not problems else f"{len(problems)} problems")
    return EXIT_OK if not problems else EXIT_PARTIAL


def cmd_sample_benchmark(args) -> int:
    manifest_path = _require(args.manifest, "pool manifest (--manifest)")
    store = ProfileStore(_require(args.profiles, "profile store (--profiles)"))
    panel = PanelConfig.load(_require(args.panel, "panel file (--panel)") if args.panel else store.panel_path)
    pool_m = read_manifest(manifest_path)
    replay = _replay(args, panel)
    profiles = store.load_experts()
    missing = [e for e in panel.expert_ids if e not in profiles]
    if missing:
        raise UsageError(f"profile store lacks experts {missing}")
    exclude = set()
    for path in args.exclude or ():
        exclude |= read_manifest(_require(path, "exclusion manifest")).hashes()
    pool = []
    for s in pool_m.samples:
        cal = [profiles[e].calibrate(float(replay.lookup(e, s.id))) for e in panel.expert_ids]
        pool.append((s, conflict_vector(cal, int(s.ground_truth))))
    datasets = tuple(sorted({s.source_dataset for s in pool_m.samples}))
    plan = StratPlan(len(panel.expert_ids), len(datasets), args.n, datasets=datasets)
    bench = stratified_sample(pool, plan, args.seed, exclude)
    bench.write(args.out)
    print(f"benchmark: {bench.realized_count}/{bench.target_count} samples ({bench.coverage_text} coverage)")
    return EXIT_OK


def _pipeline_config(args, store: ProfileStore, panel: PanelConfig, manifest_path: Path, manifest) -> PipelineConfig:
    mode = Mode(args.mode)
    if mode is Mode.LIVE:
        if not args.endpoint or not args.model:
            raise UsageError("live mode needs --endpoint and --model")
        vision = text = LiveClient(args.endpoint, args.model, seed=args.seed)
    else:
        vision = ScriptedClient.from_file(_require(args.transcripts, "scripted transcripts (--transcripts)"))
        text = vision if mode is Mode.SCRIPTED else None
    guidelines = load_guidelines(args.guidelines) if args.guidelines else load_guidelines()
    return PipelineConfig(
        panel=panel,
        expert_profiles=store.load_experts(),
        clustering_profiles=store.load_clusterings(),
        vision_client=vision,
        guidelines=guidelines,
        text_client=text,
        mode=mode,
        seed=args.seed,
        replay=_replay(args, panel),
        feature_store=_feature_store(manifest_path, manifest),
        use_expert_profiles=not args.no_expert_profiles,
        use_cluster_profiles=not args.no_cluster_profiles,
    )


def cmd_infer(args) -> int:
    manifest_path = _require(args.manifest, "manifest (--manifest)")
    store = ProfileStore(_require(args.profiles, "profile store (--profiles)"))
    panel = PanelConfig.load(_require(args.panel, "panel file (--panel)") if args.panel else store.panel_path)
    manifest = read_manifest(manifest_path)
    config = _pipeline_config(args, store, panel, manifest_path, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = ReportFormat(args.format)
    suffix = ".json" if fmt is ReportFormat.JSON else ".md"

    def one(sample):
        try:
            return sample, run_pipeline(sample, config), None
        except PipelineError as exc:
            return sample, None, exc

    workers = max(1, args.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, manifest.samples))
    else:
        results = [one(s) for s in manifest.samples]
    failures = 0
    for sample, report, exc in results:
        if exc is not None:
            failures += 1
            logger.error("%s", exc)
            (out / f"{sample.id}.error.json").write_text(canonical_json(exc.diagnostic()), encoding="utf-8")
            continue
        (out / f"{sample.id}{suffix}").write_bytes(emit(report, fmt))
    print(f"{len(results) - failures}/{len(results)} reports written to {out} (seed {args.seed})")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    manifest_path = _require(args.manifest, "manifest (--manifest)")
    reports_dir = _require(args.reports, "reports directory (--reports)")
    manifest = read_manifest(manifest_path)
    by_id = manifest.by_id()
    reports, missing = [], []
    for s in manifest.samples:
        path = reports_dir / f"{s.id}.json"
        if path.exists():
            reports.append(parse_report(path.read_bytes()))
        else:
            missing.append(s.id)
    if not reports:
        raise UsageError(f"no JSON reports for manifest samples in {reports_dir}")
    summary: EvalSummary = summarize_reports(reports, by_id, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = summary.to_dict()
    doc["missing_reports"] = missing
    (out / "summary.json").write_text(canonical_json(doc), encoding="utf-8")
    (out / "table.txt").write_text(summary.table_text(), encoding="utf-8")
    (out / "strata.csv").write_text(summary.strata_csv(), encoding="utf-8")
    print(summary.table_text(), end="")
    return EXIT_PARTIAL if missing else EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forensic-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=42):
        p.add_argument("--seed", type=int, default=seed_default, help="random seed (default %(default)s)")
        return p

    p = common(sub.add_parser("simulate", help="generate a synthetic expert panel"), seed_default=None)
    p.add_argument("--spec", help="PanelSpec JSON file (default: built-in two-regime panel)")
    p.add_argument("--n-samples", type=int, help="override the number of simulated samples")
    p.add_argument("--name", default="sim", help="sample id prefix")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    prof = sub.add_parser("profile", help="build or validate a profile store")
    psub = prof.add_subparsers(dest="profile_command", required=True)
    p = common(psub.add_parser("build", help="fit expert and clustering profiles"))
    p.add_argument("--panel", help="panel.json")
    p.add_argument("--train", help="train manifest")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--scores", nargs="*", help="replay score manifests (default: panel adapter targets)")
    p.add_argument("--k", help=f"'auto' (K in {AUTO_K_RANGE}) or modality=K list, e.g. clip=12,srm=8")
    p.add_argument("--out", required=True, help="profile store directory")
    p.set_defaults(func=cmd_profile_build)
    p = psub.add_parser("validate", help="reload and re-check a profile store")
    p.add_argument("--profiles", help="profile store directory")
    p.set_defaults(func=cmd_profile_validate)

    p = common(sub.add_parser("sample-benchmark", help="draw a conflict-stratified benchmark"))
    p.add_argument("--manifest", help="candidate pool manifest")
    p.add_argument("--profiles", help="profile store directory")
    p.add_argument("--panel", help="panel.json (default: the store's copy)")
    p.add_argument("--scores", nargs="*", help="replay score manifests")
    p.add_argument("--n", type=int, default=15, help="samples per (cell, dataset) (default %(default)s)")
    p.add_argument("--exclude", nargs="*", help="manifests whose content hashes are excluded")
    p.add_argument("--out", required=True, help="benchmark manifest path")
    p.set_defaults(func=cmd_sample_benchmark)

    p = common(sub.add_parser("infer", help="run the staged pipeline on a manifest"))
    p.add_argument("--manifest", help="samples to analyse")
    p.add_argument("--profiles", help="profile store directory")
    p.add_argument("--panel", help="panel.json (default: the store's copy)")
    p.add_argument("--scores", nargs="*", help="replay score manifests")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.RULE.value)
    p.add_argument("--transcripts", help="scripted client replies (scripted and rule modes)")
    p.add_argument("--endpoint", help="chat endpoint for live mode")
    p.add_argument("--model", help="model name for live mode")
    p.add_argument("--guidelines", help="directory with semantic/expert/cluster/report .md files")
    p.add_argument("--format", choices=[f.value for f in ReportFormat], default=ReportFormat.JSON.value)
    p.add_argument("--workers", type=int, default=1, help="parallel samples (default %(default)s)")
    p.add_argument("--no-expert-profiles", action="store_true", help="ablation: identity calibration, uniform weights")
    p.add_argument("--no-cluster-profiles", action="store_true", help="ablation: skip cluster reliability")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("evaluate", help="score reports against ground truth"))
    p.add_argument("--manifest", help="manifest with ground truth")
    p.add_argument("--reports", help="directory of JSON reports")
    p.add_argument("--out", required=True, help="output directory for summary, table and strata CSV")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
