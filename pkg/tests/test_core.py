import random
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tandem.core import (
    CostLedger,
    CostRates,
    DEFAULT_COST_RATES,
    JobOutput,
    TaskInstance,
    TokenUsage,
    cost_usd,
    is_abstention,
    normalize_answer,
    record_usage,
    usd_str,
)


class TestLedger:
    def test_accumulation_from_zero(self):
        ledger = CostLedger()
        record_usage(ledger, "remote", TokenUsage(100, 10))
        assert ledger.usage("remote") == TokenUsage(100, 10)

    def test_zero_usage_is_identity(self):
        ledger = CostLedger()
        ledger.record("remote", TokenUsage(100, 10))
        ledger.record("remote", TokenUsage(0, 0))
        assert ledger.usage("remote") == TokenUsage(100, 10)

    def test_roles_are_isolated(self):
        ledger = CostLedger()
        ledger.record("remote", TokenUsage(100, 10))
        ledger.record("local", TokenUsage(50, 5))
        assert ledger.usage("remote") == TokenUsage(100, 10)
        assert ledger.usage("local") == TokenUsage(50, 5)

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            CostLedger().record("cloud", TokenUsage(1, 1))

    def test_totals_are_order_independent(self):
        usages = [TokenUsage(i, i * 2) for i in range(20)]
        first = CostLedger()
        for usage in usages:
            first.record("remote", usage)
        shuffled = usages[:]
        random.Random(7).shuffle(shuffled)
        second = CostLedger()
        for usage in shuffled:
            second.record("remote", usage)
        assert first.usage("remote") == second.usage("remote")

    def test_negative_usage_rejected(self):
        with pytest.raises(ValueError):
            TokenUsage(-1, 0)


class TestCostUsd:
    def test_financial_report_row(self):
        # 103,040 prefill + 320 decode at 2.50e-6 / 1.00e-5 is $0.261 rounded.
        ledger = CostLedger()
        ledger.record("remote", TokenUsage(103040, 320))
        cost = cost_usd(ledger, DEFAULT_COST_RATES, ("remote",))
        assert cost == Decimal("0.26080000")
        assert usd_str(cost) == "0.261"

    def test_health_record_row(self):
        ledger = CostLedger()
        ledger.record("remote", TokenUsage(120100, 70))
        cost = cost_usd(ledger)
        assert cost == Decimal("0.30095000")
        assert usd_str(cost) == "0.301"

    def test_local_usage_is_free_by_default(self):
        ledger = CostLedger()
        ledger.record("local", TokenUsage(10**6, 10**5))
        assert cost_usd(ledger) == Decimal(0)

    @given(
        st.integers(0, 10**6),
        st.integers(0, 10**6),
        st.integers(0, 10**6),
        st.integers(0, 10**6),
    )
    def test_linearity_over_combined_ledgers(self, p1, d1, p2, d2):
        rates = CostRates(Decimal("3e-6"), Decimal("7e-6"))
        a = CostLedger()
        a.record("remote", TokenUsage(p1, d1))
        b = CostLedger()
        b.record("remote", TokenUsage(p2, d2))
        assert cost_usd(a.combine(b), rates) == cost_usd(a, rates) + cost_usd(b, rates)


class TestNormalizeAnswer:
    def test_whitespace_rules(self):
        assert normalize_answer("  US$394,328  million ") == "us$394,328 million"

    def test_single_letter(self):
        assert normalize_answer("A") == "a"

    def test_empty_preserved(self):
        assert normalize_answer("") == ""

    @given(st.text(max_size=200))
    def test_idempotent(self, text):
        once = normalize_answer(text)
        assert normalize_answer(once) == once


class TestTaskInstance:
    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            TaskInstance("t", (), "q", "a")

    def test_gold_must_match_an_option(self):
        with pytest.raises(ValueError):
            TaskInstance("t", ("doc",), "q", "C", options=("A", "B"))

    def test_gold_matches_after_normalization(self):
        task = TaskInstance("t", ("doc",), "q", " b ", options=("A", "B"))
        assert task.options == ("A", "B")

    def test_json_round_trip(self):
        task = TaskInstance("t", ("d1", "d2"), "q", "a", options=("a", "b"),
                            doc_type="ledger")
        assert TaskInstance.from_dict(task.to_dict()) == task

    def test_from_dict_requires_query(self):
        with pytest.raises(KeyError):
            TaskInstance.from_dict({"id": "t", "context": ["d"], "answer": "a"})


class TestJobOutput:
    @pytest.mark.parametrize("marker", [None, "None", "none", " NONE ", ""])
    def test_none_markers_abstain(self, marker):
        assert is_abstention(marker)
        output = JobOutput.from_fields(0, "e", "c", marker)
        assert output.abstained and output.answer is None

    def test_answer_keeps_job_active(self):
        output = JobOutput.from_fields(3, "e", "c", "394328")
        assert not output.abstained and output.answer == "394328"
        assert output.job_index == 3

    def test_numeric_answer_coerced_to_text(self):
        assert JobOutput.from_fields(0, "e", None, 394328).answer == "394328"

    def test_inconsistent_flag_rejected(self):
        with pytest.raises(ValueError):
            JobOutput(0, "e", None, "42", abstained=True)
