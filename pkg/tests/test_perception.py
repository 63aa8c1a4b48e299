"""Token assembly, FiLM behavior, padding rule, and language isolation."""

import numpy as np
import pytest

from skillbook import autograd as ag
from skillbook import envs
from skillbook.errors import ConfigError, ContractError
from skillbook.perception import (
    MODALITIES,
    FiLM,
    PerceptionEncoder,
    stack_windows,
    window_indices,
)
from skillbook.transformer import Linear


def make_encoder(d=16, window=10, n_tasks=3, seed=0):
    return PerceptionEncoder(d, window, n_tasks, enc_hidden=2 * d, rng=np.random.default_rng(seed))


def rand_batch(B=2, window=10, n_tasks=3, seed=1, language_id=None):
    r = np.random.default_rng(seed)
    ids = np.full(B, language_id if language_id is not None else 0, dtype=np.int64)
    return {
        "workspace": r.standard_normal((B, window, envs.VIEW_DIM)),
        "wrist": r.standard_normal((B, window, envs.VIEW_DIM)),
        "proprio": r.standard_normal((B, window, envs.PROPRIO_DIM)),
        "language_id": ids,
    }


def test_output_shape_window_times_modalities():
    enc = make_encoder(d=16, window=10)
    out = enc.encode_window(rand_batch(B=3))
    assert out.data.shape == (3, 50, 16)


def test_wrong_window_length_rejected():
    enc = make_encoder(window=10)
    with pytest.raises(ContractError):
        enc.encode_window(rand_batch(window=8))


def test_unknown_language_id_rejected():
    enc = make_encoder(n_tasks=2)
    with pytest.raises(ConfigError):
        enc.encode_window(rand_batch(language_id=5, n_tasks=2))


def test_token_order_and_repeat_structure():
    """With one observation repeated across the window, per-step groups agree
    except for the per-slot context token."""
    enc = make_encoder(d=8, window=4)
    b = rand_batch(B=1, window=4, seed=3)
    for key in ("workspace", "wrist", "proprio"):
        b[key] = np.repeat(b[key][:, :1], 4, axis=1)
    out = enc.encode_window(b).data.reshape(4, MODALITIES, 8)
    for m in range(4):  # workspace, wrist, proprio, language identical across steps
        for s in range(1, 4):
            assert np.array_equal(out[s, m], out[0, m])
    ctx = out[:, 4, :]
    assert not np.array_equal(ctx[0], ctx[1])  # context differs per step slot
    assert np.array_equal(ctx, enc.context.data)


def test_language_change_leaves_proprio_tokens_bit_identical():
    enc = make_encoder(d=8, window=4, n_tasks=3)
    base = rand_batch(B=1, window=4, seed=5, language_id=0)
    other = {k: v.copy() for k, v in base.items()}
    other["language_id"] = np.array([2], dtype=np.int64)
    a = enc.encode_window(base).data.reshape(4, MODALITIES, 8)
    b = enc.encode_window(other).data.reshape(4, MODALITIES, 8)
    assert a[:, 2, :].tobytes() == b[:, 2, :].tobytes()  # proprio untouched
    assert not np.array_equal(a[:, 3, :], b[:, 3, :])  # language token moved
    assert np.array_equal(a[:, 4, :], b[:, 4, :])  # context independent of language


def test_same_language_id_same_token():
    enc = make_encoder()
    t1 = enc.language.lookup(np.array([1])).data
    t2 = enc.language.lookup(np.array([1])).data
    assert t1.tobytes() == t2.tobytes()
    t0 = enc.language.lookup(np.array([0])).data
    assert not np.array_equal(t0, t1)


# ---------------------------------------------------------------------------
# FiLM


def test_film_identity_at_init():
    rng = np.random.default_rng(0)
    film = FiLM(8, 5, rng)
    x = ag.constant(rng.standard_normal((2, 3, 5)))
    cond = ag.constant(rng.standard_normal((2, 8)))
    out = film(x, cond)
    assert np.abs(out.data - x.data).max() == 0.0


def test_film_pure_shift_when_gamma_zero():
    rng = np.random.default_rng(1)
    film = FiLM(4, 3, rng)
    film.gen.b.data[3:] = 2.5  # beta slots only
    x = ag.constant(rng.standard_normal((2, 6, 3)))
    cond = ag.constant(np.zeros((2, 4)))
    out = film(x, cond)
    assert np.abs(out.data - (x.data + 2.5)).max() <= 1e-15


def test_film_scale_and_shift_formula():
    rng = np.random.default_rng(2)
    film = FiLM(4, 3, rng)
    film.gen.W.data[...] = rng.standard_normal(film.gen.W.data.shape)
    x = rng.standard_normal((2, 5, 3))
    cond = rng.standard_normal((2, 4))
    out = film(ag.constant(x), ag.constant(cond)).data
    gb = cond @ film.gen.W.data + film.gen.b.data
    gamma, beta = gb[:, :3], gb[:, 3:]
    want = (1.0 + gamma)[:, None, :] * x + beta[:, None, :]
    assert np.abs(out - want).max() <= 1e-14


def test_different_language_modulates_views_differently():
    enc = make_encoder(d=8, window=4, n_tasks=3)
    # give the FiLM generators nonzero weights as if trained
    rng = np.random.default_rng(9)
    for view in (enc.workspace, enc.wrist):
        view.film.gen.W.data[...] = rng.standard_normal(view.film.gen.W.data.shape) * 0.3
    base = rand_batch(B=1, window=4, seed=6, language_id=0)
    other = {k: v.copy() for k, v in base.items()}
    other["language_id"] = np.array([1], dtype=np.int64)
    a = enc.encode_window(base).data.reshape(4, MODALITIES, 8)
    b = enc.encode_window(other).data.reshape(4, MODALITIES, 8)
    dist = np.linalg.norm(a[:, 0, :] - b[:, 0, :])
    assert dist > 1e-3


# ---------------------------------------------------------------------------
# window padding


def test_window_indices_center_and_clamping():
    # mid-episode: symmetric past-heavy window {t-4, ..., t+5}
    assert window_indices(10, 100, 10) == [6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
    # episode start: first observation repeats
    assert window_indices(0, 100, 10) == [0, 0, 0, 0, 0, 1, 2, 3, 4, 5]
    # episode end (or online evaluation): last available repeats
    assert window_indices(99, 100, 10) == [95, 96, 97, 98, 99, 99, 99, 99, 99, 99]
    # length-1 episode: all ten slots repeat the single observation
    assert window_indices(0, 1, 10) == [0] * 10


def test_padding_equivalent_to_explicit_repeat():
    enc = make_encoder(d=8, window=10, n_tasks=5)
    task = envs.make_suite("Goal", 5, 0)[1]
    state = envs.reset(task, np.random.default_rng(0))
    obs = envs.observe(state, task)
    implicit = stack_windows([[obs]], [0], 10)
    explicit = stack_windows([[obs] * 10], [0], 10)
    for key in ("workspace", "wrist", "proprio"):
        assert implicit[key].tobytes() == explicit[key].tobytes()
    a = enc.encode_window(implicit).data
    b = enc.encode_window(explicit).data
    assert a.tobytes() == b.tobytes()


def test_stack_windows_shapes_and_language():
    task = envs.make_suite("Object", 3, 1)[2]
    rng = np.random.default_rng(1)
    state = envs.reset(task, rng)
    obs_list = [envs.observe(state, task)]
    for _ in range(14):
        state, done, _ = envs.step(state, envs.Action((0.01, 0.0), -1.0), task)
        obs_list.append(envs.observe(state, task))
        if done:
            break
    batch = stack_windows([obs_list, obs_list], [0, 7], 10)
    assert batch["workspace"].shape == (2, 10, envs.VIEW_DIM)
    assert batch["proprio"].shape == (2, 10, envs.PROPRIO_DIM)
    assert batch["language_id"].tolist() == [2, 2]
    # second item is an interior window: indices 3..12
    assert np.array_equal(batch["proprio"][1, 0], obs_list[3].proprio)


# ---------------------------------------------------------------------------
# language table freezing


def test_language_row_freezing_masks_gradients():
    from skillbook.autograd import Tape, backward

    enc = make_encoder(d=8, window=4, n_tasks=3)
    enc.language.set_trainable_rows([1])
    params = [enc.language.table]
    with Tape():
        tok = enc.language.lookup(np.array([0, 1, 2]))
        backward(ag.sum_(ag.mul(tok, tok)), params)
    g = enc.language.table.grad
    assert np.all(g[0] == 0.0) and np.all(g[2] == 0.0)
    assert np.any(g[1] != 0.0)
