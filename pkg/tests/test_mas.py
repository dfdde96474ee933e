import importlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowspeak.mas import (Alignment, AlignmentError, UnalignableError, dump_alignments,
                           durations_to_attention, durations_to_path, expand_by_durations,
                           likelihoods, load_alignments, mas, path_score)
from oracles import brute_force_alignment

mas_mod = importlib.import_module("flowspeak.mas")


def test_single_token_takes_all_frames():
    assert mas(np.random.default_rng(0).normal(size=(1, 4))).durations.tolist() == [4]


def test_square_matrix_forces_diagonal():
    assert mas(np.random.default_rng(1).normal(size=(5, 5))).durations.tolist() == [1] * 5


def test_three_by_five_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(20):
        L = rng.normal(size=(3, 5))
        score, d = brute_force_alignment(L)
        a = mas(L)
        assert path_score(L, a) == score
        assert a.durations.tolist() == d.tolist()


def test_unalignable():
    with pytest.raises(UnalignableError):
        mas(np.zeros((4, 3)))


def test_ties_stay_on_current_token():
    # all paths tie; staying while backtracking hands the spare frames to the last token
    a = mas(np.zeros((3, 6)))
    assert a.durations.tolist() == [1, 1, 4]
    score, d = brute_force_alignment(np.zeros((3, 6)))
    assert d.tolist() == [1, 1, 4]


def test_integer_ties_match_oracle_rule():
    rng = np.random.default_rng(3)
    for _ in range(50):
        L = rng.integers(-2, 3, size=(3, 6)).astype(float)
        score, d = brute_force_alignment(L)
        a = mas(L)
        assert path_score(L, a) == score
        assert a.durations.tolist() == d.tolist()


def test_constant_shift_invariance():
    L = np.random.default_rng(4).normal(size=(4, 9))
    assert np.array_equal(mas(L).path, mas(L + 123.0).path)


def test_dp_cost_is_bounded_by_grid():
    for n_tok, n_frm in [(5, 40), (10, 80), (20, 160)]:
        mas_mod.dp_counter["cells"] = 0
        mas(np.random.default_rng(n_frm).normal(size=(n_tok, n_frm)))
        assert mas_mod.dp_counter["cells"] <= n_tok * n_frm


def test_likelihood_matches_direct_sum():
    rng = np.random.default_rng(5)
    mu, z = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    L = likelihoods(mu, z)
    for i in range(3):
        for j in range(5):
            want = -0.5 * sum((z[j, c] - mu[i, c]) ** 2 + math.log(2 * math.pi) for c in range(4))
            assert math.isclose(L[i, j], want, rel_tol=1e-13)
    z2 = z.copy()
    z2[2] = mu[1]
    assert np.argmax(likelihoods(mu, z2)[:, 2]) == 1


def test_likelihood_masks_and_shape_errors():
    mu, z = np.zeros((4, 2)), np.zeros((6, 2))
    L = likelihoods(mu, z, token_mask=[1, 1, 0, 0], frame_mask=[1, 1, 1, 0, 0, 0])
    assert L.shape == (2, 3)
    assert np.all(L == L[0, 0])
    with pytest.raises(AlignmentError):
        likelihoods(np.zeros((2, 3)), np.zeros((4, 2)))


def test_expand_by_durations():
    rows = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert expand_by_durations(rows, [2, 1]).tolist() == [[1, 2], [1, 2], [3, 4]]
    np.testing.assert_array_equal(expand_by_durations(rows, [1, 1]), rows)
    t = expand_by_durations(torch.tensor(rows), torch.tensor([1, 3]))
    assert t.shape == (4, 2)
    with pytest.raises(AlignmentError):
        expand_by_durations(rows, [2, 0])


def test_attention_matches_expansion():
    mu = np.random.default_rng(6).normal(size=(3, 4))
    d = [2, 1, 3]
    attn = durations_to_attention(d, 6, torch.float64).numpy()
    np.testing.assert_allclose(mu.T @ attn, expand_by_durations(mu, d).T)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 12), st.integers(0, 2**31 - 1))
def test_mas_outputs_are_valid_alignments(n_tok, extra, seed):
    L = np.random.default_rng(seed).normal(size=(n_tok, n_tok + extra))
    a = mas(L)
    a.validate()
    assert a.durations.sum() == n_tok + extra
    assert np.array_equal(durations_to_path(a.durations), a.path)
    np.testing.assert_array_equal(
        expand_by_durations(np.arange(n_tok)[:, None], a.durations)[:, 0], a.path
    )


def test_validate_rejects_bad_paths():
    with pytest.raises(AlignmentError):
        Alignment(np.array([0, 2, 2]), 3).validate()
    with pytest.raises(AlignmentError):
        Alignment(np.array([1, 1]), 2).validate()
    with pytest.raises(AlignmentError):
        Alignment(np.array([0, 0]), 2).validate()


def test_alignment_dump_round_trip(tmp_path):
    dump_alignments(tmp_path / "a.jsonl", [("u1", [1, 2]), ("u2", np.array([3]))])
    assert load_alignments(tmp_path / "a.jsonl") == {"u1": [1, 2], "u2": [3]}
