import random

import pytest

from ta_audit.backends import (
    Backend,
    BackendSpec,
    ScriptError,
    ScriptedOracle,
)
from ta_audit.protocols import (
    COVERAGE_EVALUATED,
    COVERAGE_UNCOVERED,
    LABEL_TA,
    LABEL_VG,
    AuditRunner,
    ItemDecision,
    ProtocolAssignment,
    ProtocolError,
    ProtocolSpec,
    decision_to_record,
    get_preset,
    load_decisions,
    parse_protocol,
    run_audit,
    run_protocol,
    summarize,
    uncovered_fraction,
    write_decisions,
)

from conftest import FlakyTransport, make_dataset, mcq_item, open_item, quick_backend


def scripted_backend(
    dataset,
    behaviors=None,
    default="answer-gold",
    backend_id="b1",
) -> Backend:
    oracle = ScriptedOracle(dataset, behaviors=behaviors)
    spec = BackendSpec(
        id=backend_id,
        kind="scripted",
        model_name="oracle",
        rate_limit=0.0,
        max_retries=0,
        behavior=default,
    )
    return Backend(spec, oracle.transport(spec), sleep=lambda s: None)


# --- spec parsing ------------------------------------------------------------


def test_parse_protocol_accepts_canonical_and_alias_forms():
    assert parse_protocol("single-pass").label == "single-pass"
    assert parse_protocol("circular:3") == ProtocolSpec(kind="circular", n_permutations=3)
    assert parse_protocol("pass-at-k:10").k == 10
    assert parse_protocol("pass@10") == parse_protocol("pass-at-k:10")
    assert parse_protocol(" CIRCULAR:2 ").n_permutations == 2
    spec = parse_protocol("circular:2", escalate_on_refusal=True, template="enhanced")
    assert spec.escalate_on_refusal and spec.template == "enhanced"


@pytest.mark.parametrize(
    "text",
    ["", "circular", "circular:", "circular:x", "circular:0", "pass-at-k:0",
     "pass@", "single-pass:2", "resample", "pass-at-k"],
)
def test_parse_protocol_rejects_malformed_specs(text):
    with pytest.raises(ProtocolError):
        parse_protocol(text)


def test_protocol_spec_validation():
    with pytest.raises(ProtocolError):
        ProtocolSpec(kind="majority-vote")
    with pytest.raises(ProtocolError):
        ProtocolSpec(kind="single-pass", template="casual")
    assert ProtocolSpec(kind="pass-at-k", k=10).label == "pass-at-k:10"


def test_assignment_rejects_circular_open_ended_and_degrades_uniform():
    circular = parse_protocol("circular:3", escalate_on_refusal=True)
    with pytest.raises(ProtocolError):
        ProtocolAssignment(mcq=circular, open_ended=circular)
    assignment = ProtocolAssignment.uniform(circular)
    assert assignment.mcq is circular
    assert assignment.open_ended.kind == "single-pass"
    assert assignment.open_ended.escalate_on_refusal
    passk = parse_protocol("pass-at-k:4")
    assert ProtocolAssignment.uniform(passk).open_ended is passk
    assert assignment.for_item(mcq_item()) is circular
    assert assignment.for_item(open_item()).kind == "single-pass"


# --- single protocol runs ----------------------------------------------------


def test_single_pass_gold_answer_is_ta():
    item = mcq_item("q1", gold=2)
    backend = scripted_backend(make_dataset([item]))
    decision = run_protocol(item, backend, parse_protocol("single-pass"))
    assert decision.label == LABEL_TA and decision.is_ta
    assert decision.coverage == COVERAGE_EVALUATED
    assert decision.n_correct == 1 and len(decision.trials) == 1
    verdict = decision.trials[0]
    assert (verdict.item_id, verdict.backend_id, verdict.protocol) == ("q1", "b1", "single-pass")
    assert verdict.extracted.letter == "C" and verdict.correct


def test_circular_exposes_positional_bias():
    # Always answers the base gold letter: right once, wrong after rotation.
    item = mcq_item("q1", gold=1, n_options=4)
    backend = scripted_backend(make_dataset([item]), default="answer-fixed-letter:B")

    single = run_protocol(item, backend, parse_protocol("single-pass"))
    assert single.label == LABEL_TA

    circular = run_protocol(item, backend, parse_protocol("circular:4"))
    assert circular.label == LABEL_VG
    # Early exit: trial 0 was right, trial 1 wrong, nothing further asked.
    assert [v.correct for v in circular.trials] == [True, False]
    assert circular.n_correct == 1

    full = run_protocol(item, backend, parse_protocol("circular:4"), all_trials=True)
    assert full.label == LABEL_VG
    assert [v.correct for v in full.trials] == [True, False, False, False]
    assert [v.trial_index for v in full.trials] == [0, 1, 2, 3]


def test_circular_gold_sweep_is_ta():
    item = mcq_item("q1", gold=3, n_options=4)
    backend = scripted_backend(make_dataset([item]))
    decision = run_protocol(item, backend, parse_protocol("circular:4"))
    assert decision.label == LABEL_TA
    assert decision.n_correct == 4
    # The answered letter tracks the rotated gold position.
    letters = [v.extracted.letter for v in decision.trials]
    assert letters == ["D", "C", "B", "A"]


def test_circular_clamps_to_option_count():
    item = mcq_item("q1", gold=0, n_options=2)
    backend = scripted_backend(make_dataset([item]))
    decision = run_protocol(item, backend, parse_protocol("circular:4"))
    assert len(decision.trials) == 2
    assert decision.protocol == "circular:4"
    assert decision.label == LABEL_TA


def test_circular_on_open_ended_is_a_config_error():
    item = open_item("q1")
    backend = scripted_backend(make_dataset([item]))
    with pytest.raises(ProtocolError):
        run_protocol(item, backend, parse_protocol("circular:2"))


def test_pass_at_k_runs_all_samples_and_counts_hits():
    item = mcq_item("q1", gold=0)
    backend = scripted_backend(make_dataset([item]), default="answer-gold-at:7")
    decision = run_protocol(item, backend, parse_protocol("pass-at-k:10"))
    assert decision.label == LABEL_TA
    assert len(decision.trials) == 10
    assert decision.n_correct == 1
    assert [v.correct for v in decision.trials].index(True) == 7
    assert [v.trial_index for v in decision.trials] == list(range(10))


def test_pass_at_k_all_misses_is_vg():
    item = mcq_item("q1", gold=0)
    backend = scripted_backend(make_dataset([item]), default="garbage")
    decision = run_protocol(item, backend, parse_protocol("pass-at-k:5"))
    assert decision.label == LABEL_VG and decision.n_correct == 0
    assert len(decision.trials) == 5


def test_hard_failure_marks_item_uncovered_vg():
    item = mcq_item("q1")
    backend = scripted_backend(make_dataset([item]), default="fail")
    decision = run_protocol(item, backend, parse_protocol("circular:2"))
    assert decision.label == LABEL_VG and not decision.is_ta
    assert decision.coverage == COVERAGE_UNCOVERED
    assert decision.trials == [] and decision.n_correct == 0


def test_exhausted_retries_mark_item_uncovered():
    item = mcq_item("q1")
    backend = quick_backend(FlakyTransport(failures=99), max_retries=1)
    decision = run_protocol(item, backend, parse_protocol("single-pass"))
    assert decision.coverage == COVERAGE_UNCOVERED


def test_script_errors_propagate_as_harness_bugs():
    known = mcq_item("q1")
    stranger = mcq_item("q2", gold=1)
    backend = scripted_backend(make_dataset([known]))
    with pytest.raises(ScriptError):
        run_protocol(stranger, backend, parse_protocol("single-pass"))


# --- refusal escalation ------------------------------------------------------


def test_refusal_escalates_to_enhanced_template_once():
    item = mcq_item("q1", gold=2)
    backend = scripted_backend(make_dataset([item]), default="refuse-unless-enhanced")
    spec = parse_protocol("single-pass", escalate_on_refusal=True)
    decision = run_protocol(item, backend, spec)
    assert decision.label == LABEL_TA
    assert len(decision.trials) == 1 and decision.trials[0].correct
    assert len(decision.audit) == 1
    assert decision.audit[0].refused and not decision.audit[0].correct


def test_stubborn_refusal_stays_vg_with_audit_trail():
    item = mcq_item("q1")
    backend = scripted_backend(make_dataset([item]), default="refuse")
    spec = parse_protocol("single-pass", escalate_on_refusal=True)
    decision = run_protocol(item, backend, spec)
    assert decision.label == LABEL_VG
    assert decision.trials[0].refused  # the enhanced re-ask also refused
    assert len(decision.audit) == 1 and decision.audit[0].refused


def test_no_escalation_when_disabled_or_already_enhanced():
    item = mcq_item("q1")
    dataset = make_dataset([item])
    backend = scripted_backend(dataset, default="refuse-unless-enhanced")
    decision = run_protocol(item, backend, parse_protocol("single-pass"))
    assert decision.label == LABEL_VG and decision.audit == []

    spec = ProtocolSpec(kind="single-pass", template="enhanced", escalate_on_refusal=True)
    backend = scripted_backend(dataset, default="refuse")
    decision = run_protocol(item, backend, spec)
    assert decision.label == LABEL_VG
    assert len(decision.trials) == 1 and decision.audit == []


def test_escalation_applies_per_sample_in_pass_at_k():
    item = mcq_item("q1", gold=1)
    backend = scripted_backend(make_dataset([item]), default="refuse-unless-enhanced")
    spec = parse_protocol("pass-at-k:3", escalate_on_refusal=True)
    decision = run_protocol(item, backend, spec)
    assert decision.label == LABEL_TA and decision.n_correct == 3
    assert len(decision.audit) == 3


# --- whole-audit runs --------------------------------------------------------


def _mixed_dataset():
    return make_dataset(
        [
            mcq_item("q1", gold=0),
            open_item("q2", answer="three"),
            mcq_item("q3", gold=2, n_options=5),
            mcq_item("q4", gold=1, n_options=2),
        ]
    )


def test_run_audit_keeps_dataset_order_and_backend_keys():
    dataset = _mixed_dataset()
    runners = [
        AuditRunner(
            backend=scripted_backend(dataset, backend_id="alpha"),
            assignment=ProtocolAssignment.uniform(parse_protocol("circular:3")),
        ),
        AuditRunner(
            backend=scripted_backend(dataset, backend_id="beta", default="garbage"),
            assignment=ProtocolAssignment.uniform(parse_protocol("single-pass")),
        ),
    ]
    results = run_audit(dataset, runners, workers=3)
    assert sorted(results) == ["alpha", "beta"]
    assert [d.item_id for d in results["alpha"]] == ["q1", "q2", "q3", "q4"]
    by_id = {d.item_id: d for d in results["alpha"]}
    assert by_id["q1"].protocol == "circular:3"
    assert by_id["q2"].protocol == "single-pass"  # open-ended degradation
    assert all(d.is_ta for d in results["alpha"])
    assert not any(d.is_ta for d in results["beta"])


def test_run_audit_rejects_duplicate_backend_ids():
    dataset = _mixed_dataset()
    runners = [
        AuditRunner(
            backend=scripted_backend(dataset, backend_id="dup"),
            assignment=ProtocolAssignment.uniform(parse_protocol("single-pass")),
        )
    ] * 2
    with pytest.raises(ProtocolError):
        run_audit(dataset, runners)


def test_run_audit_worker_count_does_not_change_labels():
    dataset = _mixed_dataset()
    behaviors = {"q1": "answer-fixed-letter:A", "q3": "garbage"}

    def labels(workers):
        runner = AuditRunner(
            backend=scripted_backend(dataset, behaviors=behaviors),
            assignment=ProtocolAssignment.uniform(parse_protocol("circular:2")),
        )
        return [d.label for d in run_audit(dataset, [runner], workers=workers)["b1"]]

    assert labels(1) == labels(8)


def test_summarize_and_uncovered_fraction():
    dataset = make_dataset([mcq_item("q1"), mcq_item("q2", gold=1), mcq_item("q3", gold=2)])
    backend = scripted_backend(dataset, behaviors={"q2": "garbage", "q3": "fail"})
    runner = AuditRunner(
        backend=backend,
        assignment=ProtocolAssignment.uniform(parse_protocol("single-pass")),
    )
    decisions = run_audit(dataset, [runner])["b1"]
    assert summarize(decisions) == {
        "total": 3, "ta": 1, "vg": 2, "uncovered": 1, "ta_rate": round(1 / 3, 4),
    }
    assert uncovered_fraction(decisions) == pytest.approx(1 / 3)
    assert uncovered_fraction([]) == 0.0


# --- persistence -------------------------------------------------------------


def _some_decisions():
    dataset = _mixed_dataset()
    backend = scripted_backend(
        dataset,
        behaviors={"q3": "refuse-unless-enhanced", "q4": "fail"},
    )
    assignment = ProtocolAssignment(
        mcq=parse_protocol("circular:2", escalate_on_refusal=True),
        open_ended=parse_protocol("pass-at-k:3", escalate_on_refusal=True),
    )
    return run_audit(dataset, [AuditRunner(backend=backend, assignment=assignment)])["b1"]


def test_decision_store_round_trip(tmp_path):
    decisions = _some_decisions()
    path = write_decisions(tmp_path / "b1.jsonl", decisions)
    loaded = load_decisions(path)
    assert [decision_to_record(d) for d in loaded] == [
        decision_to_record(d) for d in decisions
    ]
    # Escalation audit trail survives the round trip.
    by_id = {d.item_id: d for d in loaded}
    assert by_id["q3"].audit and by_id["q3"].audit[0].refused
    assert by_id["q4"].coverage == COVERAGE_UNCOVERED


def test_decision_store_bytes_ignore_volatile_transport_fields(tmp_path):
    decisions = _some_decisions()
    first = write_decisions(tmp_path / "a.jsonl", decisions).read_bytes()
    for decision in decisions:
        for verdict in decision.trials + decision.audit:
            verdict.raw.latency_s = 123.456
            verdict.raw.attempt = 9
            verdict.raw.cached = True
    second = write_decisions(tmp_path / "b.jsonl", decisions).read_bytes()
    assert first == second
    assert not list(tmp_path.glob("*.tmp"))


def test_decision_store_without_raw_text(tmp_path):
    decisions = _some_decisions()
    path = write_decisions(tmp_path / "b1.jsonl", decisions, include_raw=False)
    assert b'"response"' not in path.read_bytes()
    loaded = load_decisions(path)
    assert loaded[0].trials[0].raw.text == ""
    assert [d.label for d in loaded] == [d.label for d in decisions]


def test_load_decisions_reports_bad_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = write_decisions(tmp_path / "good.jsonl", _some_decisions()[:1])
    path.write_text(good.read_text(encoding="utf-8") + "{not json\n", encoding="utf-8")
    with pytest.raises(ProtocolError, match="line 2"):
        load_decisions(path)
    path.write_text('{"item_id": "q1"}\n', encoding="utf-8")
    with pytest.raises(ProtocolError, match="line 1"):
        load_decisions(path)


# --- label-structure properties ----------------------------------------------

_BEHAVIOR_POOL = (
    "answer-gold",
    "answer-fixed-letter:A",
    "answer-fixed-letter:B",
    "answer-fixed-letter:C",
    "garbage",
    "refuse",
)


def _random_mcq_dataset(rng, n_items):
    items = []
    for i in range(n_items):
        n_options = rng.randint(2, 6)
        items.append(mcq_item(f"q{i}", gold=rng.randrange(n_options), n_options=n_options))
    return make_dataset(items)


def test_stricter_circular_protocols_shrink_the_ta_set():
    rng = random.Random(23)
    for _ in range(10):
        dataset = _random_mcq_dataset(rng, 12)
        behaviors = {item.id: rng.choice(_BEHAVIOR_POOL) for item in dataset}
        backend = scripted_backend(dataset, behaviors=behaviors)
        ta_sets = []
        for protocol in ["single-pass", "circular:2", "circular:3", "circular:4"]:
            runner = AuditRunner(
                backend=backend,
                assignment=ProtocolAssignment.uniform(parse_protocol(protocol)),
            )
            decisions = run_audit(dataset, [runner], workers=2)["b1"]
            ta_sets.append({d.item_id for d in decisions if d.is_ta})
        for stricter, looser in zip(ta_sets[1:], ta_sets):
            assert stricter <= looser


def test_pass_at_k_ta_set_grows_with_k():
    rng = random.Random(31)
    dataset = make_dataset([mcq_item(f"q{i}", gold=rng.randrange(4)) for i in range(15)])
    behaviors = {
        item.id: f"answer-gold-at:{rng.randrange(12)}" for item in dataset
    }
    backend = scripted_backend(dataset, behaviors=behaviors)
    previous: set[str] = set()
    for k in (2, 5, 8, 12):
        runner = AuditRunner(
            backend=backend,
            assignment=ProtocolAssignment.uniform(parse_protocol(f"pass-at-k:{k}")),
        )
        decisions = run_audit(dataset, [runner], workers=4)["b1"]
        current = {d.item_id for d in decisions if d.is_ta}
        assert previous <= current
        previous = current
    # Every scripted hit index is below 12, so the widest protocol finds all.
    assert previous == {item.id for item in dataset}


def test_early_exit_and_full_sweep_agree_on_labels():
    rng = random.Random(41)
    for _ in range(8):
        dataset = _random_mcq_dataset(rng, 10)
        behaviors = {item.id: rng.choice(_BEHAVIOR_POOL) for item in dataset}
        backend = scripted_backend(dataset, behaviors=behaviors)
        spec = parse_protocol(f"circular:{rng.randint(2, 5)}")
        for item in dataset:
            fast = run_protocol(item, backend, spec)
            slow = run_protocol(item, backend, spec, all_trials=True)
            assert fast.label == slow.label
            assert len(fast.trials) <= len(slow.trials)


# --- presets -----------------------------------------------------------------


def test_preset_shapes():
    vidground = get_preset("vidground")
    assert vidground.threshold == 1 and len(vidground.roles) == 1
    assert vidground.roles[0].mcq.label == "single-pass"

    m1 = get_preset("m1")
    assert m1.threshold == 2 and len(m1.roles) == 3
    assert [role.mcq.label for role in m1.roles] == ["single-pass", "circular:2", "circular:3"]
    assert [role.open_ended.label for role in m1.roles] == [
        "single-pass", "pass-at-k:10", "single-pass",
    ]
    assert all(role.mcq.escalate_on_refusal for role in m1.roles)
    assert all(role.open_ended.escalate_on_refusal for role in m1.roles)

    m2 = get_preset("m2")
    assert [role.mcq.label for role in m2.roles] == ["single-pass", "circular:4", "circular:3"]

    with pytest.raises(ProtocolError):
        get_preset("m3")
