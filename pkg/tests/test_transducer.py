"""Encoder/decoder pass structure, attention bookkeeping, and policy purity."""

import math

import numpy as np
import pytest

from ltt import autodiff as ad
from ltt import model as M
from ltt.errors import ContractViolation, TrajectoryAbandoned
from ltt.stack import GEN, NT, REDUCE, PassLimits
from ltt.transducer import (
    AttentionMatrix, EncoderNode, EncoderNodeTable, decode_pass, encode_pass,
    reduce_spans, structural_attention,
)


def make_binding(d=4, V=6, seed=0):
    params = M.init_parameters(d, V, seed)
    tape = ad.Tape()
    return tape, M.ParamBinding(tape, params), params


FLAT = [NT, GEN, GEN, REDUCE]


class TestEncodePass:
    def test_forced_flat_tree_single_node_span(self):
        _, b, _ = make_binding()
        traj, table = encode_pass(b, [1, 2], forced=FLAT)
        assert traj.transitions == FLAT
        assert len(table) == 1
        assert table.nodes[0].span == (0, 2)
        assert table.complete

    def test_nested_nodes_in_reduce_order(self):
        _, b, _ = make_binding()
        forced = [NT, NT, GEN, REDUCE, GEN, REDUCE]
        traj, table = encode_pass(b, [1, 2], forced=forced)
        assert [n.span for n in table.nodes] == [(0, 1), (0, 2)]

    def test_gen_count_equals_source_length(self):
        _, b, _ = make_binding()
        for seed in range(5):
            tape = ad.Tape()
            b2 = M.ParamBinding(tape, b.params)
            traj, _ = encode_pass(b2, [1, 2, 3, 4], mode="sample",
                                  rng=np.random.default_rng(seed))
            assert len(traj.gen_records) == 4
            assert traj.transitions.count(NT) == traj.transitions.count(REDUCE)

    def test_same_seed_identical_trajectory(self):
        _, _, params = make_binding(seed=3)
        runs = []
        for _ in range(2):
            tape = ad.Tape()
            b = M.ParamBinding(tape, params)
            traj, _ = encode_pass(b, [1, 2, 3], mode="sample",
                                  rng=np.random.default_rng(42))
            runs.append(traj)
        a, c = runs
        assert a.transitions == c.transitions
        for ra, rc in zip(a.records, c.records):
            assert ra.prob == rc.prob
            np.testing.assert_array_equal(ra.distribution, rc.distribution)

    def test_s_enc_is_post_push_summary(self):
        _, b, params = make_binding()
        traj, table = encode_pass(b, [1, 2], forced=FLAT)
        tape2 = ad.Tape()
        b2 = M.ParamBinding(tape2, params)
        h, _ = M.lstm_step(b2.cell("stack"), b2.zero_state(),
                           b2["x_enc_embedding"])
        # root s_enc was recorded after pushing x^enc, before any child
        np.testing.assert_array_equal(table.nodes[0].s_enc.value, h.value)

    def test_lm_loss_recomputable_from_stored_summary(self):
        _, b, params = make_binding()
        traj, _ = encode_pass(b, [1, 2, 3], forced=[NT, GEN, GEN, GEN, REDUCE])
        for rec in traj.gen_records:
            tape2 = ad.Tape()
            b2 = M.ParamBinding(tape2, params)
            dist = M.output_distribution(b2, tape2.const(rec.stack_summary.value))
            assert abs(float(rec.lm_loss.value)
                       + math.log(dist.value[rec.char_id])) < 1e-12

    def test_budget_exhaustion_raises(self):
        _, b, _ = make_binding()
        with pytest.raises(TrajectoryAbandoned) as ei:
            encode_pass(b, [1, 2], limits=PassLimits(max_depth=40,
                                                     max_actions=2),
                        mode="sample", rng=np.random.default_rng(0))
        assert ei.value.side == "enc"
        assert ei.value.budget == 2

    def test_empty_source_rejected(self):
        _, b, _ = make_binding()
        with pytest.raises(ContractViolation):
            encode_pass(b, [])

    def test_illegal_forced_action_rejected(self):
        _, b, _ = make_binding()
        with pytest.raises(ContractViolation):
            encode_pass(b, [1], forced=[GEN, GEN, REDUCE])


class TestStructuralAttention:
    def test_single_node_full_weight(self):
        tape, b, _ = make_binding()
        table = EncoderNodeTable()
        h = tape.const(np.arange(4.0))
        table.append(EncoderNode(s_enc=tape.const(np.ones(4)), h_enc=h))
        alphas, x = structural_attention(tape.const(np.ones(4)), table)
        np.testing.assert_allclose(alphas.value, [1.0])
        np.testing.assert_array_equal(x.value, h.value)

    def test_equal_scores_mean_of_phrases(self):
        tape, b, _ = make_binding()
        table = EncoderNodeTable()
        h0, h1 = tape.const(np.array([2.0, 0, 0, 0])), tape.const(
            np.array([0, 4.0, 0, 0]))
        same_s = np.ones(4)
        table.append(EncoderNode(s_enc=tape.const(same_s), h_enc=h0))
        table.append(EncoderNode(s_enc=tape.const(same_s.copy()), h_enc=h1))
        alphas, x = structural_attention(tape.const(np.ones(4)), table)
        np.testing.assert_allclose(alphas.value, [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(x.value, [1.0, 2.0, 0, 0], atol=1e-15)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(9)
        tape, b, _ = make_binding()
        table = EncoderNodeTable()
        s_list = [rng.normal(size=4) for _ in range(3)]
        h_list = [rng.normal(size=4) for _ in range(3)]
        for s, h in zip(s_list, h_list):
            table.append(EncoderNode(s_enc=tape.const(s), h_enc=tape.const(h)))
        q = rng.normal(size=4)
        alphas, x = structural_attention(tape.const(q), table)
        dots = [sum(si * qi for si, qi in zip(s, q)) for s in s_list]
        m = max(dots)
        e = [math.exp(v - m) for v in dots]
        probs = [v / sum(e) for v in e]
        np.testing.assert_allclose(alphas.value, probs, rtol=0, atol=1e-12)
        expected = [sum(probs[i] * h_list[i][k] for i in range(3))
                    for k in range(4)]
        np.testing.assert_allclose(x.value, expected, rtol=0, atol=1e-12)

    def test_incomplete_table_rejected(self):
        tape, b, _ = make_binding()
        table = EncoderNodeTable()
        table.append(EncoderNode(s_enc=tape.const(np.ones(4)), h_enc=None))
        with pytest.raises(ContractViolation):
            structural_attention(tape.const(np.ones(4)), table)
        with pytest.raises(ContractViolation):
            structural_attention(tape.const(np.ones(4)), EncoderNodeTable())


class TestDecodePass:
    def run_pair(self, forced_enc, forced_dec, src=(1, 2), tgt=(3, 4), seed=0):
        _, b, params = make_binding(seed=seed)
        traj_e, table = encode_pass(b, list(src), forced=forced_enc)
        traj_d, matrix = decode_pass(b, table, list(tgt), forced=forced_dec)
        return traj_e, table, traj_d, matrix

    def test_single_node_single_nt_matrix(self):
        _, _, traj_d, matrix = self.run_pair(FLAT, [NT, GEN, GEN, REDUCE])
        np.testing.assert_allclose(matrix.values, [[1.0]])
        matrix.validate()

    def test_one_attention_event_per_nt(self):
        forced_dec = [NT, NT, GEN, REDUCE, NT, GEN, REDUCE, REDUCE]
        _, _, traj_d, matrix = self.run_pair(FLAT, forced_dec)
        nt_indices = [k for k, t in enumerate(traj_d.transitions) if t == NT]
        assert matrix.n_columns == len(nt_indices) == 3
        assert matrix.column_action_index == nt_indices
        matrix.validate()

    def test_teacher_forced_gen_count(self):
        _, _, params = make_binding(seed=7)
        tape = ad.Tape()
        b = M.ParamBinding(tape, params)
        _, table = encode_pass(b, [1, 2], mode="sample",
                               rng=np.random.default_rng(1))
        traj_d, _ = decode_pass(b, table, [3, 4, 5], mode="sample",
                                rng=np.random.default_rng(2))
        assert len(traj_d.gen_records) == 3
        assert traj_d.gen_chars == [3, 4, 5]

    def test_attention_column_rows_match_table_size(self):
        forced_enc = [NT, NT, GEN, REDUCE, GEN, REDUCE]
        _, table, _, matrix = self.run_pair(forced_enc, [NT, GEN, GEN, REDUCE])
        assert matrix.values.shape == (2, 1)

    def test_free_running_terminates_and_is_deterministic(self):
        _, b, params = make_binding(seed=11)
        _, table = encode_pass(b, [1, 2, 3], forced=[NT, GEN, GEN, GEN,
                                                     REDUCE])
        outs = []
        for _ in range(2):
            tape = ad.Tape()
            b2 = M.ParamBinding(tape, params)
            _, table2 = encode_pass(b2, [1, 2, 3],
                                    forced=[NT, GEN, GEN, GEN, REDUCE])
            traj, _ = decode_pass(b2, table2, None, mode="argmax",
                                  free_cap=12)
            depth = 0
            for t in traj.transitions:
                depth += (t == NT) - (t == REDUCE)
                assert depth >= 0
            assert depth == 0
            assert len(traj.gen_records) <= 12
            outs.append(traj.transitions)
        assert outs[0] == outs[1]

    def test_free_running_needs_cap(self):
        _, b, _ = make_binding()
        _, table = encode_pass(b, [1], forced=[NT, GEN, REDUCE])
        with pytest.raises(ContractViolation):
            decode_pass(b, table, None, mode="argmax")


class TestStackOnlyPolicy:
    def test_buffer_perturbation_does_not_leak(self):
        # the policy may read only the stack; unconsumed chars must not
        # influence any distribution computed before they are ingested
        rng = np.random.default_rng(5)
        _, _, params = make_binding(d=5, V=8, seed=5)
        for case in range(10):
            n = int(rng.integers(3, 7))
            src = [int(rng.integers(1, 8)) for _ in range(n)]
            pos = int(rng.integers(1, n))
            alt = list(src)
            alt[pos] = 1 + (alt[pos] % 7)
            assert alt != src
            trajs = []
            for ids in (src, alt):
                tape = ad.Tape()
                b = M.ParamBinding(tape, params)
                traj, _ = encode_pass(b, ids, mode="sample",
                                      rng=np.random.default_rng(1000 + case))
                trajs.append(traj)
            for ra, rb in zip(trajs[0].records, trajs[1].records):
                consumed = ra.gen_count - (ra.transition == GEN)
                if consumed > pos:
                    break
                assert ra.transition == rb.transition
                np.testing.assert_array_equal(ra.distribution, rb.distribution)
                np.testing.assert_array_equal(ra.stack_summary.value,
                                              rb.stack_summary.value)


class TestSpans:
    def test_reduce_spans_nested(self):
        _, b, _ = make_binding()
        forced = [NT, NT, GEN, REDUCE, NT, GEN, REDUCE, REDUCE]
        traj, _ = encode_pass(b, [1, 2], forced=forced)
        assert reduce_spans(traj) == [(0, 1), (1, 2), (0, 2)]
