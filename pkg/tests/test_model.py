"""Transformer checks: masks, incremental-vs-full equivalence, checkpoints."""

import numpy as np
import pytest

from specdesk.core import InvalidInputError
from specdesk.model import (
    AttentionSpec,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    KVCache,
    ModelConfig,
    TinyTransformer,
    causal_attention,
    forward,
    forward_step,
    forward_with_tape,
    load_checkpoint,
    save_checkpoint,
)

CFG = ModelConfig(layers=2, width=16, heads=2, ff_width=32, vocab_size=11,
                  mask_count=2, max_position=64)


def small_model(seed=0):
    return TinyTransformer.fresh(CFG, seed=seed)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(layers=0)
    with pytest.raises(InvalidInputError):
        ModelConfig(width=30, heads=4)
    with pytest.raises(InvalidInputError):
        ModelConfig(pos_encoding="learned")


def test_config_odd_head_dim_rejected():
    with pytest.raises(InvalidInputError):
        ModelConfig(width=6, heads=2)  # head dim 3 is odd


def test_attention_spec_validation():
    with pytest.raises(InvalidInputError):
        AttentionSpec(mask=np.ones((2, 3), dtype=bool), positions=np.arange(2))
    bad = np.ones((3, 3), dtype=bool)
    bad[1, 1] = False
    with pytest.raises(InvalidInputError):
        AttentionSpec(mask=bad, positions=np.arange(3))
    with pytest.raises(InvalidInputError):
        AttentionSpec(mask=np.eye(2, dtype=bool), positions=np.array([0, -1]))


def test_causal_attention_structure():
    spec = causal_attention(4, start_position=3)
    assert spec.mask.shape == (4, 4)
    np.testing.assert_array_equal(spec.mask, np.tril(np.ones((4, 4), dtype=bool)))
    np.testing.assert_array_equal(spec.positions, [3, 4, 5, 6])


def test_parameter_shape_validation():
    m = small_model()
    params = dict(m.params)
    del params["head_w"]
    with pytest.raises(InvalidInputError):
        TinyTransformer(CFG, params)
    params = dict(m.params)
    params["head_w"] = params["head_w"][:, :-1]
    with pytest.raises(InvalidInputError):
        TinyTransformer(CFG, params)


def test_forward_deterministic_and_tape_free_equal():
    m = small_model()
    toks = [1, 4, 2, 9, 0]
    spec = causal_attention(len(toks))
    l1, h1 = forward(m, toks, spec)
    l2, h2, tape = forward_with_tape(m, toks, spec)
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(h1, h2)
    assert tape is not None
    l3, _ = forward(m, toks, spec)
    np.testing.assert_array_equal(l1, l3)


def test_logits_cover_base_vocab_only():
    m = small_model()
    logits, _ = forward(m, [1, 2], causal_attention(2))
    assert logits.shape == (2, CFG.vocab_size)


def test_mask_tokens_embeddable():
    m = small_model()
    mask1 = CFG.vocab_size  # first mask prompt id
    logits, _ = forward(m, [1, mask1, mask1 + 1], causal_attention(3))
    assert np.isfinite(logits).all()
    with pytest.raises(InvalidInputError):
        forward(m, [1, mask1 + 2], causal_attention(2))  # beyond mask_count


def test_masked_out_token_cannot_leak():
    # position 2 does not see position 1; changing token 1 must leave the
    # logits at rows 0 and 2 bit-identical
    m = small_model()
    mask = np.array([
        [True, False, False],
        [True, True, False],
        [True, False, True],
    ])
    spec = AttentionSpec(mask=mask, positions=np.array([0, 1, 1]))
    la, _ = forward(m, [3, 5, 7], spec)
    lb, _ = forward(m, [3, 8, 7], spec)
    np.testing.assert_array_equal(la[0], lb[0])
    np.testing.assert_array_equal(la[2], lb[2])
    assert not np.array_equal(la[1], lb[1])


def test_rotary_depends_on_position_not_index():
    # same token at the same rotary position and same visible set gives the
    # same logits even when it sits at a different row of the batch
    m = small_model()
    spec_a = causal_attention(3)
    la, _ = forward(m, [4, 6, 2], spec_a)
    # duplicate the final token as two parallel leaves, both at position 2,
    # both seeing only the first two tokens and themselves
    mask = np.array([
        [True, False, False, False],
        [True, True, False, False],
        [True, True, True, False],
        [True, True, False, True],
    ])
    spec_b = AttentionSpec(mask=mask, positions=np.array([0, 1, 2, 2]))
    lb, _ = forward(m, [4, 6, 2, 2], spec_b)
    np.testing.assert_allclose(lb[2], la[2], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(lb[3], la[2], rtol=1e-12, atol=1e-12)


def test_incremental_matches_full_forward():
    m = small_model()
    toks = [1, 4, 2, 9, 0, 6, 3]
    full, _ = forward(m, toks, causal_attention(len(toks)))
    cache = KVCache(m)
    got = []
    for i, t in enumerate(toks):
        mask = np.ones((1, cache.total_len + 1), dtype=bool)
        logits, _ = forward_step(m, cache, [t], [i], mask)
        cache.commit_block([0])
        got.append(logits[0])
    np.testing.assert_allclose(np.array(got), full, rtol=1e-9, atol=1e-9)


def test_block_commit_keeps_selected_path():
    # run a 3-token speculative block, keep only the middle entry, and check
    # the continuation matches a causal run over the kept sequence
    m = small_model(seed=2)
    prefix = [5, 1, 8]
    cache = KVCache(m)
    for i, t in enumerate(prefix):
        forward_step(m, cache, [t], [i], np.ones((1, cache.total_len + 1), dtype=bool))
        cache.commit_block([0])

    block = [2, 4, 7]
    n = cache.total_len
    mask = np.zeros((3, n + 3), dtype=bool)
    mask[:, :n] = True
    mask[np.arange(3), n + np.arange(3)] = True  # parallel leaves
    forward_step(m, cache, block, [3, 3, 3], mask)
    cache.commit_block([1])
    assert cache.committed_len == 4
    assert cache.block_len == 0

    nxt = 9
    mask2 = np.ones((1, cache.total_len + 1), dtype=bool)
    logits_inc, _ = forward_step(m, cache, [nxt], [4], mask2)

    ref_seq = prefix + [block[1], nxt]
    ref, _ = forward(m, ref_seq, causal_attention(len(ref_seq)))
    np.testing.assert_allclose(logits_inc[0], ref[-1], rtol=1e-9, atol=1e-9)


def test_rollback_erases_block():
    m = small_model(seed=3)
    cache = KVCache(m)
    forward_step(m, cache, [1], [0], np.ones((1, 1), dtype=bool))
    cache.commit_block([0])

    snapshot_k = cache.k.copy()
    forward_step(m, cache, [7, 7], [1, 1],
                 np.array([[True, True, False], [True, False, True]]))
    cache.rollback_block()
    assert cache.total_len == 1

    logits_a, _ = forward_step(m, cache, [2], [1], np.ones((1, 2), dtype=bool))
    cache.rollback_block()
    # same step on a never-polluted cache
    cache2 = KVCache(m)
    forward_step(m, cache2, [1], [0], np.ones((1, 1), dtype=bool))
    cache2.commit_block([0])
    logits_b, _ = forward_step(m, cache2, [2], [1], np.ones((1, 2), dtype=bool))
    np.testing.assert_array_equal(logits_a, logits_b)
    np.testing.assert_array_equal(snapshot_k[:, :1], cache.k[:, :1])


def test_interleaved_commit_and_rollback():
    m = small_model(seed=4)
    toks = [1, 2, 3, 4]
    cache = KVCache(m)
    for i, t in enumerate(toks):
        # first a junk block that gets rolled back
        forward_step(m, cache, [9], [i], np.ones((1, cache.total_len + 1), dtype=bool))
        cache.rollback_block()
        forward_step(m, cache, [t], [i], np.ones((1, cache.total_len + 1), dtype=bool))
        cache.commit_block([0])
    mask = np.ones((1, cache.total_len + 1), dtype=bool)
    logits, _ = forward_step(m, cache, [5], [4], mask)
    ref, _ = forward(m, toks + [5], causal_attention(5))
    np.testing.assert_allclose(logits[0], ref[-1], rtol=1e-9, atol=1e-9)


def test_forward_step_validation():
    m = small_model()
    cache = KVCache(m)
    with pytest.raises(InvalidInputError):
        forward_step(m, cache, [1], [0], np.ones((1, 2), dtype=bool))
    with pytest.raises(InvalidInputError):
        forward_step(m, cache, [1], [0], np.zeros((1, 1), dtype=bool))
    with pytest.raises(InvalidInputError):
        forward_step(m, cache, [1], [CFG.max_position], np.ones((1, 1), dtype=bool))
    small = KVCache(m, capacity=1)
    forward_step(m, small, [1], [0], np.ones((1, 1), dtype=bool))
    small.commit_block([0])
    with pytest.raises(InvalidInputError):
        forward_step(m, small, [2], [1], np.ones((1, 2), dtype=bool))


def test_commit_block_validates_keep():
    m = small_model()
    cache = KVCache(m)
    forward_step(m, cache, [1, 2], [0, 0],
                 np.array([[True, False], [False, True]]))
    with pytest.raises(InvalidInputError):
        cache.commit_block([1, 0])
    with pytest.raises(InvalidInputError):
        cache.commit_block([0, 2])


def test_next_distribution_matches_forward():
    m = small_model(seed=5)
    prefix = [2, 7, 1]
    logits, _ = forward(m, prefix, causal_attention(3))
    d = m.next_distribution(prefix, temperature=1.0)
    ref = np.exp(logits[-1] - logits[-1].max())
    ref = ref / ref.sum()
    np.testing.assert_allclose(d.probs, ref, rtol=1e-12, atol=1e-12)


def test_head_gain_sharpens():
    cfg = ModelConfig(layers=1, width=16, heads=2, ff_width=32, vocab_size=11,
                      max_position=32)
    flat = TinyTransformer.fresh(cfg, seed=1, head_gain=1.0)
    sharp = TinyTransformer.fresh(cfg, seed=1, head_gain=8.0)

    def entropy(model):
        p = model.next_distribution([1, 2, 3]).probs
        nz = p[p > 0]
        return -float(np.sum(nz * np.log(nz)))

    assert entropy(sharp) < entropy(flat)


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(seed=9)
    m.frozen = frozenset({"emb_base"})
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config
    assert back.frozen == m.frozen
    assert back.param_names() == m.param_names()
    for name in m.param_names():
        np.testing.assert_array_equal(back.params[name], m.params[name])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    m = small_model()
    path = tmp_path / "v.ckpt"
    save_checkpoint(m, path)
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    m = small_model()
    path = tmp_path / "t.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 7])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(data[:8])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    import json

    m = small_model()
    path = tmp_path / "s.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    mlen = int.from_bytes(data[8:12], "little")
    manifest = json.loads(data[12 : 12 + mlen])
    manifest["tensors"][0]["shape"] = [1, 1]
    blob = json.dumps(manifest, sort_keys=True).encode()
    patched = data[:8] + len(blob).to_bytes(4, "little") + blob + data[12 + mlen :]
    path.write_bytes(patched)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)
