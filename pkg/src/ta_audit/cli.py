"""Command line entry points.

Commands: eval (audit a dataset against backends), filter (consensus-curate
a visually grounded subset), categorize (classify why TA items leaked),
report (tables, JSON/CSV, figures), grpo-check (numerical self-checks).

Exit codes: 0 success, 2 configuration/validation error, 3 coverage breach,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analytics import (
    AnalyticsError,
    agreement,
    decompose_scores,
    format_table,
    load_result_log,
    passk_histogram,
    pct,
    ta_ids,
    ta_rate,
    vg_ids,
)
from .backends import (
    Backend,
    HttpChatTransport,
    ResponseCache,
    ScriptedOracle,
    file_digest,
    make_backend,
    resolve_api_key,
)
from .config import (
    BackendConfig,
    ConfigError,
    RunConfig,
    load_toml,
    parse_backends,
)
from .corpus import Dataset, DatasetError, load_dataset
from .curation import (
    CategoryOracle,
    CurationError,
    TA_CATEGORIES,
    build_variant,
    categorize_ta,
    consensus_over_stores,
)
from .extraction import DEFAULT_REFUSAL_TERMS, load_refusal_terms
from .grpomath import GrpoError, self_check
from .prompting import PromptError, TemplateSet
from .protocols import (
    PRESETS,
    AuditRunner,
    CoverageError,
    ProtocolAssignment,
    ProtocolError,
    get_preset,
    load_decisions,
    run_audit,
    summarize,
    uncovered_fraction,
    write_decisions,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_COVERAGE = 3

log = logging.getLogger(__name__)


def _load_templates(path: str | None) -> TemplateSet:
    if path is None:
        return TemplateSet.builtin()
    return TemplateSet.from_mapping(load_toml(path))


def _load_refusals(path: str | None) -> tuple[str, ...]:
    if path is None:
        return DEFAULT_REFUSAL_TERMS
    return DEFAULT_REFUSAL_TERMS + load_refusal_terms(path)


def _planned_requests(
    dataset: Dataset, assignments: list[ProtocolAssignment]
) -> int:
    total = 0
    for assignment in assignments:
        for item in dataset:
            spec = assignment.for_item(item)
            if spec.kind == "circular":
                total += min(spec.n_permutations, len(item.options))
            elif spec.kind == "pass-at-k":
                total += spec.k
            else:
                total += 1
    return total


def cmd_eval(args: argparse.Namespace) -> int:
    run = (
        RunConfig.from_file(args.config, base_url=args.base_url)
        if args.config
        else RunConfig()
    )
    entries: list[tuple[BackendConfig, Path]] = [
        (bc, run.base_dir) for bc in run.backends
    ]
    if args.backend:
        extra = parse_backends(load_toml(args.backend), base_url=args.base_url)
        base = Path(args.backend).parent
        entries.extend((bc, base) for bc in extra)
    if not entries:
        raise ConfigError("no backends configured (use --backend or --config)")
    ids = [bc.spec.id for bc, _ in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate backend ids: {ids}")

    dataset_path = Path(args.dataset) if args.dataset else run.resolve(run.dataset)
    if dataset_path is None:
        raise ConfigError("no dataset given (use --dataset or `dataset` in config)")
    out = Path(args.out) if args.out else run.resolve(run.out)
    if out is None:
        raise ConfigError("no output directory given (use --out)")

    preset_name = args.preset or run.preset
    protocol = args.protocol or run.protocol
    workers = args.workers if args.workers is not None else run.workers
    max_uncovered = (
        args.max_uncovered if args.max_uncovered is not None else run.max_uncovered
    )
    all_trials = args.all_trials or run.all_trials
    include_raw = run.include_raw and not args.no_raw

    templates = _load_templates(args.template_file or run.template_file)
    refusal_terms = _load_refusals(args.refusal_terms or run.refusal_terms)
    dataset = load_dataset(dataset_path)

    if preset_name:
        preset = get_preset(preset_name)
        if len(entries) != len(preset.roles):
            raise ConfigError(
                f"preset {preset.name!r} binds {len(preset.roles)} backend(s), "
                f"config has {len(entries)}"
            )
        if any(bc.protocol for bc, _ in entries):
            log.warning("preset %s overrides per-backend protocols", preset.name)
        assignments = list(preset.roles)
    else:
        assignments = [bc.assignment(fallback_protocol=protocol) for bc, _ in entries]

    if args.dry_run:
        planned = _planned_requests(dataset, assignments)
        print(f"dry run: {len(dataset)} items, {len(entries)} backend(s)")
        for (bc, _), assignment in zip(entries, assignments):
            print(
                f"  {bc.spec.id}: mcq={assignment.mcq.label} "
                f"open-ended={assignment.open_ended.label}"
            )
        print(f"planned requests (before caching, early exit, escalation): {planned}")
        return EXIT_OK

    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    handler = logging.FileHandler(out / "logs" / "eval.log")
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    package_log = logging.getLogger("ta_audit")
    package_log.addHandler(handler)
    try:
        manifest = {
            "dataset": {
                "path": str(dataset_path),
                "sha256": file_digest(dataset_path),
            },
            "preset": preset_name,
            "backends": [
                {
                    "id": bc.spec.id,
                    "kind": bc.spec.kind,
                    "model_name": bc.spec.model_name,
                    "mcq_protocol": assignment.mcq.label,
                    "open_ended_protocol": assignment.open_ended.label,
                }
                for (bc, _), assignment in zip(entries, assignments)
            ],
            "workers": workers,
            "max_uncovered": max_uncovered,
            "all_trials": all_trials,
            "include_raw": include_raw,
        }
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

        runners = []
        for (bc, base_dir), assignment in zip(entries, assignments):
            oracle = None
            if bc.spec.kind == "scripted":
                oracle = ScriptedOracle(
                    dataset,
                    templates,
                    behaviors=bc.load_behaviors(base_dir),
                    default_behavior=bc.default_behavior,
                )
            backend = make_backend(bc.spec, cache_root=out / "cache", oracle=oracle)
            runners.append(AuditRunner(backend=backend, assignment=assignment))

        results = run_audit(
            dataset,
            runners,
            templates=templates,
            workers=workers,
            all_trials=all_trials,
            refusal_terms=refusal_terms,
        )
    finally:
        package_log.removeHandler(handler)
        handler.close()

    summary = {}
    for backend_id, decisions in results.items():
        write_decisions(
            out / "decisions" / f"{backend_id}.jsonl", decisions, include_raw
        )
        summary[backend_id] = summarize(decisions)
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    rows = [
        [bid, s["total"], s["ta"], s["vg"], s["uncovered"], pct(s["ta_rate"])]
        for bid, s in summary.items()
    ]
    print(format_table(["backend", "total", "TA", "VG", "uncovered", "TA %"], rows))

    breaches = {
        bid: uncovered_fraction(decisions)
        for bid, decisions in results.items()
        if uncovered_fraction(decisions) > max_uncovered
    }
    if breaches:
        for bid, fraction in breaches.items():
            print(
                f"error: backend {bid!r} uncovered fraction {fraction:.4f} "
                f"exceeds --max-uncovered {max_uncovered}",
                file=sys.stderr,
            )
        return EXIT_COVERAGE
    return EXIT_OK


def _collect_stores(run_dirs: list[str]) -> dict[str, Path]:
    stores: dict[str, Path] = {}
    for run in run_dirs:
        decisions_dir = Path(run) / "decisions"
        if not decisions_dir.is_dir():
            raise ConfigError(f"{run}: no decisions/ directory (not an eval run?)")
        files = sorted(decisions_dir.glob("*.jsonl"))
        if not files:
            raise ConfigError(f"{run}: decisions/ holds no stores")
        for path in files:
            backend_id = path.stem
            if backend_id in stores:
                raise ConfigError(
                    f"backend {backend_id!r} appears in more than one run"
                )
            stores[backend_id] = path
    return stores


def _dataset_path(explicit: str | None, run_dirs: list[str]) -> Path:
    if explicit:
        return Path(explicit)
    seen: list[tuple[str, str | None]] = []
    for run in run_dirs:
        manifest_path = Path(run) / "manifest.json"
        if not manifest_path.is_file():
            raise ConfigError(f"{run}: missing manifest.json; pass --dataset")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entry = manifest.get("dataset") or {}
        if not entry.get("path"):
            raise ConfigError(f"{run}: manifest records no dataset; pass --dataset")
        seen.append((entry["path"], entry.get("sha256")))
    if len({p for p, _ in seen}) > 1 or len({s for _, s in seen}) > 1:
        raise ConfigError("runs disagree on their dataset; pass --dataset explicitly")
    return Path(seen[0][0])


def cmd_filter(args: argparse.Namespace) -> int:
    preset = get_preset(args.preset)
    if not args.out:
        raise ConfigError("filter needs --out for the subset file")
    store_paths = _collect_stores(args.runs)
    dataset_path = _dataset_path(args.dataset, args.runs)
    dataset = load_dataset(dataset_path)

    result = build_variant(
        preset,
        store_paths,
        dataset,
        args.out,
        dataset_path=dataset_path,
        threshold=args.threshold,
        max_uncovered=args.max_uncovered,
    )
    manifest = result.manifest
    print(
        f"{preset.name}: retained {manifest['retained']}/{manifest['total']} "
        f"({pct(manifest['retention_rate'])}%), threshold {manifest['threshold']}, "
        f"{manifest['uncovered']} uncovered vote(s)"
    )
    print(f"subset:   {result.subset.path}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


def cmd_categorize(args: argparse.Namespace) -> int:
    store_paths = _collect_stores(args.runs)
    dataset_path = _dataset_path(args.dataset, args.runs)
    dataset = load_dataset(dataset_path)
    if not args.out:
        raise ConfigError("categorize needs --out for the category file")

    ta: set[str] = set()
    for path in store_paths.values():
        ta |= ta_ids(load_decisions(path))
    items = [item for item in dataset if item.id in ta]
    if not items:
        raise ConfigError("no TA items found in the given runs")

    judge_config = parse_backends(load_toml(args.judge), base_url=args.base_url)[0]
    spec = judge_config.spec
    if spec.kind == "scripted":
        oracle = CategoryOracle(
            dataset,
            behaviors=judge_config.load_behaviors(Path(args.judge).parent),
            default_behavior=judge_config.default_behavior or "external-knowledge",
        )
        transport = oracle.transport(spec)
    else:
        transport = HttpChatTransport(spec, api_key=resolve_api_key(spec))
    cache = ResponseCache(Path(args.cache_dir) / spec.id) if args.cache_dir else None
    judge = Backend(spec, transport, cache=cache)

    counts = {name: 0 for name in TA_CATEGORIES}
    flagged = 0
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for item in items:
            category = categorize_ta(item, judge)
            if category is None:
                flagged += 1
                record = {"item_id": item.id, "category": None, "flagged": True}
            else:
                counts[category.value] += 1
                record = {
                    "item_id": item.id,
                    "category": category.value,
                    "flagged": False,
                    "rationale": category.rationale,
                }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    rows = [[name, count] for name, count in counts.items()]
    rows.append(["unassigned (flagged)", flagged])
    print(format_table(["category", "items"], rows))
    print(f"categories written to {out_path}")
    return EXIT_OK


def _write_csv(path: Path, headers: list[str], rows: list[list[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)


def cmd_report(args: argparse.Namespace) -> int:
    store_paths = _collect_stores(args.runs)
    decisions = {bid: load_decisions(path) for bid, path in store_paths.items()}
    dataset_path = _dataset_path(args.dataset, args.runs)
    dataset = load_dataset(dataset_path)
    out_dir = Path(args.out) if args.out else Path(args.runs[0]) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)

    kind = args.kind
    wants = lambda k: kind in ("all", k)  # noqa: E731
    payload: dict = {}
    figures = []

    if wants("ta-rate"):
        reports = [
            ta_rate(
                store,
                baseline=args.baseline,
                dataset=None if args.baseline is not None else dataset,
            )
            for store in decisions.values()
        ]
        payload["ta_rate"] = [r.to_dict() for r in reports]
        rows = [
            [
                d["backend_id"], d["total"], d["ta"], d["uncovered"],
                d["ta_rate_pct"], d.get("baseline_pct"), d.get("delta_pct"),
            ]
            for d in payload["ta_rate"]
        ]
        print(format_table(
            ["backend", "total", "TA", "uncovered", "TA %", "baseline %", "delta"],
            rows,
        ))
        print()
        if args.csv:
            _write_csv(
                out_dir / "ta_rate.csv",
                ["backend", "total", "ta", "vg", "uncovered", "ta_rate_pct",
                 "baseline_pct", "delta_pct"],
                [[d["backend_id"], d["total"], d["ta"], d["vg"], d["uncovered"],
                  d["ta_rate_pct"], d.get("baseline_pct"), d.get("delta_pct")]
                 for d in payload["ta_rate"]],
            )
        if not args.no_figures:
            from .figures import save_ta_rate_figure

            figures.append(save_ta_rate_figure(reports, out_dir / "ta_rate.png"))

    if wants("agreement") and (kind == "agreement" or len(decisions) in (2, 3)):
        sets = {bid: vg_ids(store) for bid, store in decisions.items()}
        report = agreement(sets, dataset.ids)
        payload["agreement"] = report.to_dict()
        jaccard_rows = [[pair, pct(v)] for pair, v in report.jaccard.items()]
        cell_rows = [[cell, count, pct(count / report.universe)]
                     for cell, count in report.cells.items()]
        print(format_table(["pair", "jaccard %"], jaccard_rows))
        print()
        print(format_table(["cell", "items", "% of dataset"], cell_rows))
        print()
        if args.csv:
            _write_csv(
                out_dir / "agreement.csv",
                ["metric", "key", "value"],
                [["jaccard_pct", k, pct(v)] for k, v in report.jaccard.items()]
                + [["cell_count", k, v] for k, v in report.cells.items()],
            )
        if not args.no_figures:
            from .figures import save_agreement_figure

            figures.append(save_agreement_figure(report, out_dir / "agreement.png"))

    if wants("passk"):
        passk_stores = {
            bid: store
            for bid, store in decisions.items()
            if any(d.protocol.startswith("pass-at-k:") for d in store)
        }
        if kind == "passk" and not passk_stores:
            raise AnalyticsError("no pass-at-k decisions in the given runs")
        payload["passk"] = {}
        for bid, store in passk_stores.items():
            report = passk_histogram(store, dataset)
            payload["passk"][bid] = report.to_dict()
            rows = [
                [split, s["n"], s["pct_zero"], s["pct_nonzero"], s["pct_all"]]
                for split, s in (
                    ("overall", report.overall.to_dict()),
                    *(
                        (m, r.to_dict())
                        for m, r in report.by_modality.items()
                        if r.n
                    ),
                )
            ]
            print(f"pass-at-{report.k} ({bid}):")
            print(format_table(
                ["split", "items", "zero %", "nonzero %", "all %"], rows
            ))
            print()
            if args.csv:
                _write_csv(
                    out_dir / f"passk_{bid}.csv",
                    ["split", "bin", "count"],
                    [["overall", i, c] for i, c in enumerate(report.overall.bins)]
                    + [
                        [m, i, c]
                        for m, split in report.by_modality.items()
                        for i, c in enumerate(split.bins)
                    ],
                )
            if not args.no_figures:
                from .figures import save_passk_figure

                figures.append(
                    save_passk_figure(report, out_dir / f"passk_{bid}.png")
                )

    if wants("scores") and (kind == "scores" or args.result_log):
        if not args.result_log:
            raise ConfigError("scores report needs --result-log")
        records = load_result_log(args.result_log)
        if args.vg_from:
            if args.vg_from not in decisions:
                raise ConfigError(
                    f"--vg-from {args.vg_from!r} is not one of {sorted(decisions)}"
                )
            vg = vg_ids(decisions[args.vg_from])
        else:
            threshold = min(2, len(decisions))
            votes = consensus_over_stores(decisions, dataset.ids, threshold)
            vg = {v.item_id for v in votes if v.retained}
        report = decompose_scores(records, vg)
        payload["scores"] = report.to_dict()
        rows = []
        for model in payload["scores"]["models"]:
            text = model["text_only"]
            rows.append([model["model"], "text-only", "", text["n"],
                         text["acc_pct"], "", text["acc_vg_pct"], ""])
            for row in model["with_video"]:
                rows.append([
                    model["model"], "with-video", row["frames"], row["n"],
                    row["acc_pct"], row["gain_pct"], row["acc_vg_pct"],
                    row["gain_vg_pct"],
                ])
        print(format_table(
            ["model", "mode", "frames", "n", "acc %", "gain %", "VG acc %",
             "VG gain %"],
            rows,
        ))
        print()
        if args.csv:
            _write_csv(
                out_dir / "scores.csv",
                ["model", "mode", "frames", "n", "acc_pct", "gain_pct",
                 "acc_vg_pct", "gain_vg_pct"],
                rows,
            )
        if not args.no_figures:
            from .figures import save_scores_figure

            figures.append(save_scores_figure(report, out_dir / "scores.png"))

    if not payload:
        raise ConfigError(f"nothing to report for kind {kind!r} with these runs")

    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"report written to {report_path}")
    for figure in figures:
        print(f"figure: {figure}")
    return EXIT_OK


def cmd_grpo_check(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    results = self_check(seed=seed)
    rows = [
        [
            r.name,
            r.cases,
            f"{r.max_error:.3e}",
            f"{r.tolerance:.1e}",
            "PASS" if r.passed else "FAIL",
        ]
        for r in results
    ]
    print(format_table(["check", "cases", "max error", "tolerance", "status"], rows))
    if all(r.passed for r in results):
        print(f"all {len(results)} checks passed (seed {seed})")
        return EXIT_OK
    print("numerical self-checks FAILED", file=sys.stderr)
    return EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ta-audit",
        description="Audit visual QA datasets for text-only answerability "
        "and curate visually grounded subsets.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration TOML")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--dry-run", action="store_true",
                        help="plan only; no requests, no writes")
    common.add_argument("--seed", type=int, default=None, help="RNG seed")

    p = sub.add_parser("eval", parents=[common],
                       help="run an answerability audit over a dataset")
    p.add_argument("--dataset", help="dataset JSONL")
    p.add_argument("--backend", help="TOML file with [[backends]]")
    p.add_argument("--protocol",
                   help="single-pass | circular:N | pass-at-k:K (all backends)")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named protocol suite; binds backends by position")
    p.add_argument("--workers", type=int, default=None, help="thread pool size")
    p.add_argument("--max-uncovered", type=float, default=None,
                   help="max tolerated uncovered fraction (default 0.01)")
    p.add_argument("--all-trials", action="store_true",
                   help="disable circular early exit")
    p.add_argument("--no-raw", action="store_true",
                   help="omit raw response text from decision stores")
    p.add_argument("--template-file", help="TOML overriding prompt templates")
    p.add_argument("--refusal-terms", help="file with extra refusal phrases")
    p.add_argument("--base-url", help="override http-chat endpoints with BASE/chat/completions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("filter", parents=[common],
                       help="consensus-filter a dataset into a VG subset")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--runs", nargs="+", required=True, help="eval run directories")
    p.add_argument("--dataset", help="dataset JSONL (default: from run manifests)")
    p.add_argument("--threshold", type=int, default=None,
                   help="override the preset's consensus threshold")
    p.add_argument("--max-uncovered", type=float, default=0.01,
                   help="max tolerated uncovered vote fraction")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("categorize", parents=[common],
                       help="classify why TA items were answerable")
    p.add_argument("--runs", nargs="+", required=True, help="eval run directories")
    p.add_argument("--dataset", help="dataset JSONL (default: from run manifests)")
    p.add_argument("--judge", required=True, help="TOML describing the judge backend")
    p.add_argument("--cache-dir", help="cache judge responses here")
    p.add_argument("--base-url", help="override the judge endpoint")
    p.set_defaults(func=cmd_categorize)

    p = sub.add_parser("report", parents=[common],
                       help="tables, JSON/CSV and figures from decision stores")
    p.add_argument("--runs", nargs="+", required=True, help="eval run directories")
    p.add_argument("--dataset", help="dataset JSONL (default: from run manifests)")
    p.add_argument("--kind", default="all",
                   choices=["all", "ta-rate", "agreement", "passk", "scores"])
    p.add_argument("--baseline", type=float, default=None,
                   help="baseline accuracy as a fraction (default: computed)")
    p.add_argument("--result-log", help="JSONL of with-video/text-only results")
    p.add_argument("--vg-from", help="backend id whose VG labels gate the scores split")
    p.add_argument("--csv", action="store_true", help="also write CSV files")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grpo-check", parents=[common],
                       help="run the policy-objective numerical self-checks")
    p.set_defaults(func=cmd_grpo_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if not args.verbose:
        logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except CoverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except (
        ConfigError,
        DatasetError,
        PromptError,
        ProtocolError,
        CurationError,
        AnalyticsError,
        GrpoError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
