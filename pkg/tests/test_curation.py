import json
import random

import pytest

from ta_audit.backends import (
    Backend,
    BackendSpec,
    PermanentBackendError,
    ScriptError,
    ScriptedOracle,
)
from ta_audit.corpus import load_dataset
from ta_audit.curation import (
    TA_CATEGORIES,
    VOTE_UNCOVERED,
    CategoryOracle,
    CurationError,
    TACategory,
    build_category_prompt,
    build_variant,
    categorize_ta,
    consensus,
    consensus_over_stores,
)
from ta_audit.protocols import (
    COVERAGE_EVALUATED,
    COVERAGE_UNCOVERED,
    AuditRunner,
    CoverageError,
    ItemDecision,
    ProtocolAssignment,
    get_preset,
    parse_protocol,
    run_audit,
    write_decisions,
)

from conftest import CountingTransport, make_dataset, mcq_item, open_item, write_dataset


def vote(item_id, backend_id, label, coverage=COVERAGE_EVALUATED) -> ItemDecision:
    return ItemDecision(
        item_id=item_id,
        backend_id=backend_id,
        protocol="single-pass",
        trials=[],
        n_correct=1 if label == "TA" else 0,
        label=label,
        coverage=coverage,
    )


def judge_backend(transport, max_retries=0) -> Backend:
    spec = BackendSpec(
        id="judge",
        kind="scripted",
        model_name="judge-model",
        rate_limit=0.0,
        max_retries=max_retries,
    )
    return Backend(spec, transport, sleep=lambda s: None)


# --- consensus ---------------------------------------------------------------


def test_consensus_counts_ta_votes_against_threshold():
    decisions = {
        "b1": vote("q1", "b1", "TA"),
        "b2": vote("q1", "b2", "VG"),
        "b3": vote("q1", "b3", "TA"),
    }
    decided = consensus(decisions, threshold=2)
    assert decided.item_id == "q1"
    assert decided.n_models_correct == 2
    assert not decided.retained  # 2 >= threshold 2: the text alone sufficed
    assert decided.votes == {"b1": "TA", "b2": "VG", "b3": "TA"}

    decisions["b3"] = vote("q1", "b3", "VG")
    assert consensus(decisions, threshold=2).retained


def test_uncovered_weighs_like_a_vg_vote():
    decisions = {
        "b1": vote("q1", "b1", "TA"),
        "b2": vote("q1", "b2", "VG", coverage=COVERAGE_UNCOVERED),
        "b3": vote("q1", "b3", "TA"),
    }
    decided = consensus(decisions, threshold=2)
    assert decided.votes["b2"] == VOTE_UNCOVERED
    assert decided.n_models_correct == 2
    assert not decided.retained

    # With one real TA vote the uncovered backend cannot tip the item out.
    decisions["b3"] = vote("q1", "b3", "VG")
    assert consensus(decisions, threshold=2).retained


def test_single_backend_threshold_one():
    assert not consensus({"b1": vote("q1", "b1", "TA")}, threshold=1).retained
    assert consensus({"b1": vote("q1", "b1", "VG")}, threshold=1).retained
    uncovered = consensus(
        {"b1": vote("q1", "b1", "VG", coverage=COVERAGE_UNCOVERED)}, threshold=1
    )
    assert uncovered.retained  # conservative: keep what was never audited


def test_consensus_validation():
    with pytest.raises(CurationError):
        consensus({}, threshold=1)
    with pytest.raises(CurationError):
        consensus({"b1": vote("q1", "b1", "TA")}, threshold=0)
    with pytest.raises(CurationError, match="mixed item ids"):
        consensus({"b1": vote("q1", "b1", "TA"), "b2": vote("q2", "b2", "TA")})


def test_raising_the_threshold_only_adds_retained_items():
    rng = random.Random(53)
    item_ids = [f"q{i}" for i in range(40)]
    stores = {
        backend_id: [
            vote(
                item_id,
                backend_id,
                rng.choice(["TA", "VG"]),
                coverage=rng.choice([COVERAGE_EVALUATED] * 9 + [COVERAGE_UNCOVERED]),
            )
            for item_id in item_ids
        ]
        for backend_id in ("b1", "b2", "b3")
    }
    previous: set[str] = set()
    for threshold in (1, 2, 3, 4):
        retained = {
            v.item_id
            for v in consensus_over_stores(stores, item_ids, threshold)
            if v.retained
        }
        assert previous <= retained
        previous = retained
    assert previous == set(item_ids)  # no backend triples are all TA at t=4


def test_consensus_over_stores_is_strict_about_coverage():
    item_ids = ["q1", "q2"]
    good = {
        "b1": [vote("q1", "b1", "TA"), vote("q2", "b1", "VG")],
        "b2": [vote("q1", "b2", "VG"), vote("q2", "b2", "VG")],
    }
    decided = consensus_over_stores(good, item_ids, threshold=1)
    assert [v.item_id for v in decided] == item_ids
    assert [v.retained for v in decided] == [False, True]

    stray = {"b1": good["b1"] + [vote("q9", "b1", "TA")], "b2": good["b2"]}
    with pytest.raises(CurationError, match="unknown item 'q9'"):
        consensus_over_stores(stray, item_ids, threshold=1)

    doubled = {"b1": good["b1"] + [vote("q1", "b1", "TA")], "b2": good["b2"]}
    with pytest.raises(CurationError, match="duplicate decision"):
        consensus_over_stores(doubled, item_ids, threshold=1)

    short = {"b1": good["b1"][:1], "b2": good["b2"]}
    with pytest.raises(CurationError, match="missing 1 decision"):
        consensus_over_stores(short, item_ids, threshold=1)


# --- variant building --------------------------------------------------------


def _mixed_items():
    return [
        mcq_item("q1", gold=0),
        mcq_item("q2", gold=1, n_options=5),
        open_item("q3", answer="three"),
        mcq_item("q4", gold=2),
        open_item("q5", answer="a kite"),
        mcq_item("q6", gold=3),
    ]


def _write_role_stores(tmp_path, dataset, preset, behaviors):
    """Run each preset role with its own scripted backend; return store paths."""
    store_paths = {}
    for i, assignment in enumerate(preset.roles):
        backend_id = f"b{i + 1}"
        oracle = ScriptedOracle(dataset, behaviors=behaviors.get(backend_id, {}))
        spec = BackendSpec(
            id=backend_id,
            kind="scripted",
            model_name=f"model-{i + 1}",
            rate_limit=0.0,
            max_retries=0,
        )
        backend = Backend(spec, oracle.transport(spec), sleep=lambda s: None)
        decisions = run_audit(
            dataset, [AuditRunner(backend=backend, assignment=assignment)], workers=2
        )[backend_id]
        store_paths[backend_id] = write_decisions(
            tmp_path / f"{backend_id}.jsonl", decisions
        )
    return store_paths


def test_build_variant_end_to_end(tmp_path):
    items = _mixed_items()
    dataset_path = write_dataset(tmp_path / "data.jsonl", items)
    dataset = load_dataset(dataset_path)
    preset = get_preset("vidground")
    behaviors = {
        "b1": {
            "q1": "answer-gold",        # TA: dropped at threshold 1
            "q2": "garbage",            # VG: retained
            "q3": "refuse",             # VG (refusal is not an answer)
            "q4": "fail",               # uncovered: retained conservatively
            "q5": "answer-gold",        # TA
            "q6": "answer-fixed-letter:D",  # gold is D: single-pass TA
        }
    }
    store_paths = _write_role_stores(tmp_path, dataset, preset, behaviors)
    out_path = tmp_path / "vg.jsonl"
    result = build_variant(
        preset, store_paths, dataset, out_path, dataset_path=dataset_path
    )

    kept_ids = [json.loads(line)["id"] for line in out_path.read_text().splitlines()]
    assert kept_ids == ["q2", "q3", "q4"]
    assert result.subset.kept == 3 and result.subset.total == 6

    manifest = json.loads(result.manifest_path.read_text())
    assert result.manifest_path.name == "vg.manifest.json"
    assert manifest["preset"] == "vidground"
    assert manifest["threshold"] == 1
    assert manifest["total"] == 6 and manifest["retained"] == 3
    assert manifest["retention_rate"] == 0.5
    assert manifest["uncovered"] == 1
    assert manifest["backends"] == [{"id": "b1", "protocol": "single-pass"}]
    assert set(manifest["input_digests"]) == {"b1", "dataset"}
    assert all(len(d) == 64 for d in manifest["input_digests"].values())
    assert manifest["timestamp"]

    # Retained lines are byte-identical to the source dataset's lines.
    source = {json.loads(line)["id"]: line for line in dataset_path.read_text().splitlines()}
    for line in out_path.read_text().splitlines():
        assert line == source[json.loads(line)["id"]]


def test_build_variant_m1_protocol_labels(tmp_path):
    items = _mixed_items()
    dataset = make_dataset(items)
    preset = get_preset("m1")
    store_paths = _write_role_stores(tmp_path, dataset, preset, behaviors={})
    result = build_variant(preset, store_paths, dataset, tmp_path / "out.jsonl")
    manifest = result.manifest
    assert [b["protocol"] for b in manifest["backends"]] == [
        "single-pass",
        "circular:2+pass-at-k:10",
        "circular:3+single-pass",
    ]
    # Default behavior answers gold everywhere: every item is TA 3 times.
    assert manifest["retained"] == 0
    assert (tmp_path / "out.jsonl").read_text() == ""

    # Brute-force recount straight from the stores.
    from ta_audit.protocols import load_decisions

    stores = {b: load_decisions(p) for b, p in store_paths.items()}
    recount = sum(
        1 for v in consensus_over_stores(stores, dataset.ids, preset.threshold) if v.retained
    )
    assert recount == manifest["retained"]


def test_build_variant_store_count_must_match_preset(tmp_path):
    dataset = make_dataset(_mixed_items())
    preset = get_preset("m1")
    with pytest.raises(CurationError, match="expects 3 decision store"):
        build_variant(preset, {"b1": tmp_path / "b1.jsonl"}, dataset, tmp_path / "o.jsonl")


def test_build_variant_enforces_coverage_ceiling(tmp_path):
    items = _mixed_items()
    dataset = make_dataset(items)
    preset = get_preset("vidground")
    behaviors = {"b1": {"q1": "fail", "q2": "fail", "q3": "fail"}}
    store_paths = _write_role_stores(tmp_path, dataset, preset, behaviors)
    with pytest.raises(CoverageError, match="exceeds ceiling"):
        build_variant(
            preset, store_paths, dataset, tmp_path / "o.jsonl", max_uncovered=0.25
        )
    # Without a ceiling the variant is written; uncovered items are retained.
    result = build_variant(preset, store_paths, dataset, tmp_path / "o.jsonl")
    assert result.manifest["uncovered"] == 3
    assert result.subset.kept == 3


def test_build_variant_threshold_override(tmp_path):
    dataset = make_dataset(_mixed_items())
    preset = get_preset("vidground")
    store_paths = _write_role_stores(tmp_path, dataset, preset, behaviors={})
    result = build_variant(
        preset, store_paths, dataset, tmp_path / "o.jsonl", threshold=2
    )
    # One TA vote each is below the overridden threshold; everything stays.
    assert result.manifest["threshold"] == 2
    assert result.subset.kept == 6


# --- TA-cause categorization -------------------------------------------------


def test_build_category_prompt_mcq_and_open():
    mcq = mcq_item("q1", gold=2, modality="video")
    prompt = build_category_prompt(mcq)
    assert "video question" in prompt
    for name, definition in TA_CATEGORIES.items():
        assert f"- {name}:" in prompt
        assert definition in prompt
    assert mcq.question in prompt
    assert "C. emerald" in prompt
    assert "Correct answer: C. emerald" in prompt

    opened = open_item("q2", answer="three", modality="image")
    prompt = build_category_prompt(opened)
    assert "image question" in prompt
    assert "Options:" not in prompt
    assert "Correct answer: three" in prompt


def test_ta_category_value_is_validated():
    TACategory(value="imagined-content", rationale="r")
    with pytest.raises(CurationError):
        TACategory(value="lucky-guess", rationale="r")


@pytest.mark.parametrize(
    "reply,expected",
    [
        ("Clearly a textual-shortcut.", "textual-shortcut"),
        ("TEXTUAL SHORTCUT", "textual-shortcut"),
        ("textual_shortcut", "textual-shortcut"),
        ("the reply says externalknowledge", "external-knowledge"),
        ("I lean inferential-elimination here", "inferential-elimination"),
        ("imagined-content\n", "imagined-content"),
    ],
)
def test_categorize_accepts_separator_variants(reply, expected):
    item = mcq_item("q1")
    judge = judge_backend(CountingTransport(text=reply))
    got = categorize_ta(item, judge)
    assert got is not None and got.value == expected
    assert got.rationale == reply


def test_categorize_rejects_ambiguous_and_empty_replies():
    item = mcq_item("q1")
    for reply in ["textual-shortcut or external-knowledge", "no idea", ""]:
        transport = CountingTransport(text=reply)
        assert categorize_ta(item, judge_backend(transport)) is None
        assert transport.calls == 2  # one retry with a fresh sample


def test_categorize_retry_can_recover():
    def transport(prompt, sample_index):
        if sample_index == 0:
            return "Could be textual-shortcut or external-knowledge.", "stop"
        return "On reflection: imagined-content.", "stop"

    got = categorize_ta(mcq_item("q1"), judge_backend(transport))
    assert got is not None and got.value == "imagined-content"


def test_categorize_judge_failure_is_unassigned():
    def transport(prompt, sample_index):
        raise PermanentBackendError("judge down")

    assert categorize_ta(mcq_item("q1"), judge_backend(transport)) is None


def test_category_oracle_behaviors():
    items = [mcq_item("q1"), mcq_item("q2", gold=1), open_item("q3"), mcq_item("q4", gold=2)]
    dataset = make_dataset(items)
    oracle = CategoryOracle(
        dataset,
        behaviors={"q1": "textual-shortcut", "q2": "ambiguous", "q3": "garbage"},
    )
    spec = BackendSpec(id="judge", kind="scripted", model_name="j", rate_limit=0.0)
    transport = CountingTransport(inner=oracle.transport(spec))
    judge = Backend(spec, transport, sleep=lambda s: None)

    assert categorize_ta(items[0], judge).value == "textual-shortcut"
    assert categorize_ta(items[1], judge) is None  # ambiguous both samples
    assert categorize_ta(items[2], judge) is None  # garbage both samples
    assert categorize_ta(items[3], judge).value == "external-knowledge"  # default
    assert transport.calls == 1 + 2 + 2 + 1

    with pytest.raises(ScriptError):
        oracle.transport(spec)("never rendered", 0)
    bad = CategoryOracle(dataset, behaviors={"q1": "wing-it"})
    with pytest.raises(ScriptError):
        categorize_ta(items[0], Backend(spec, bad.transport(spec), sleep=lambda s: None))
