import math
import struct
import zlib

import numpy as np
import pytest

from desklm.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    ContextOverflowError,
    ShapeMismatchError,
    VersionError,
)
from desklm.lora import attach_adapters
from desklm.model import (
    GenerationParams,
    TransformerConfig,
    chunk_nll,
    forward,
    generate,
    init_model,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
)
from desklm.tokenizer import ByteTokenizer
from desklm.training import TrainConfig, mean_chunk_nll, train_lm


def test_same_seed_same_checkpoint(tmp_path, tiny_config):
    save_checkpoint(init_model(tiny_config), tmp_path / "a.ftlm")
    save_checkpoint(init_model(tiny_config), tmp_path / "b.ftlm")
    assert (tmp_path / "a.ftlm").read_bytes() == (tmp_path / "b.ftlm").read_bytes()


def test_head_divisibility():
    TransformerConfig(model_dim=64, num_heads=4)
    with pytest.raises(ConfigError):
        TransformerConfig(model_dim=65, num_heads=4)


def test_default_desk_shapes():
    cfg = TransformerConfig()
    assert (cfg.vocab_size, cfg.model_dim, cfg.num_layers, cfg.num_heads) == (259, 64, 2, 4)
    assert cfg.mlp_hidden == 256
    shapes = parameter_shapes(cfg)
    assert shapes["tok_emb"] == (259, 64)
    assert shapes["layers.1.mlp.w_in"] == (64, 256)


def test_embedding_mean_statistic():
    cfg = TransformerConfig(seed=11)
    emb = init_model(cfg).params["tok_emb"].data.astype(np.float64)
    n = emb.size
    assert abs(emb.mean()) <= 3 * 0.02 / math.sqrt(n)
    assert emb.std() == pytest.approx(0.02, rel=0.05)


def test_causality(tiny_model, rng):
    ids = rng.integers(3, 259, size=12)
    base = forward(tiny_model, ids).data
    for j in (0, 5, 11):
        changed = ids.copy()
        changed[j] = (changed[j] + 7) % 256 + 3
        out = forward(tiny_model, changed).data
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j:], base[j:])


def test_zero_b_adapters_bit_equal(tiny_model, rng):
    ids = rng.integers(3, 259, size=9)
    base = forward(tiny_model, ids).data
    ad = attach_adapters(tiny_model, rank=4, seed=2)
    assert np.array_equal(forward(tiny_model, ids, ad).data, base)


def test_single_token(tiny_model):
    out = forward(tiny_model, [40]).data
    assert out.shape == (1, 259)
    assert np.isfinite(out).all()


def test_context_overflow(tiny_model):
    with pytest.raises(ContextOverflowError):
        forward(tiny_model, [5] * 33)


def test_random_init_loss_near_uniform(rng):
    w = init_model(TransformerConfig(seed=4))
    ids = rng.integers(3, 259, size=512)
    assert abs(chunk_nll(w, ids).item() - math.log(259)) <= 0.5


def test_chunk_nll_brute_force(tiny_model, rng):
    ids = rng.integers(3, 259, size=20)
    logits = forward(tiny_model, ids).data.astype(np.float64)
    total = 0.0
    for i in range(ids.size - 1):
        row = logits[i]
        m = row.max()
        total += -(row[ids[i + 1]] - m - math.log(np.exp(row - m).sum()))
    assert chunk_nll(tiny_model, ids).item() == pytest.approx(total / (ids.size - 1), abs=1e-5)


@pytest.fixture(scope="module")
def periodic_model():
    tok = ByteTokenizer()
    cfg = TransformerConfig(context_length=32, model_dim=32, num_layers=2, num_heads=4, seed=0)
    w = init_model(cfg)
    ids = np.array(tok.encode("abc" * 11)[:32])
    train_lm(w, None, [ids], TrainConfig(epochs=300, lr=1e-2, weight_decay=0.0, stop_loss=0.05))
    return w, ids


def test_overfit_chunk_loss(periodic_model):
    w, ids = periodic_model
    assert mean_chunk_nll(w, [ids]) < 0.1


def test_overfit_greedy_continues_period(periodic_model):
    w, _ = periodic_model
    params = GenerationParams(max_new_tokens=12)
    out = generate(w, "abcab", params)
    assert out == "abcab" + "cabcabcabcab"
    assert generate(w, "abcab", params) == out


def test_zero_new_tokens(tiny_model):
    assert generate(tiny_model, "prompt", GenerationParams(max_new_tokens=0)) == "prompt"


def test_sampling_is_seeded(tiny_model):
    p = GenerationParams(max_new_tokens=8, strategy="top-k", k=5, seed=9)
    assert generate(tiny_model, "x", p) == generate(tiny_model, "x", p)


def test_generate_prompt_overflow(tiny_model):
    with pytest.raises(ContextOverflowError):
        generate(tiny_model, "z" * 40, GenerationParams(max_new_tokens=1))


def test_generate_slides_window(tiny_model):
    out = generate(tiny_model, "q" * 32, GenerationParams(max_new_tokens=5))
    assert out.startswith("q" * 32)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ftlm"
    save_checkpoint(tiny_model, path)
    back = load_checkpoint(path)
    assert back.config == tiny_model.config
    assert list(back.params) == list(tiny_model.params)
    for k, v in tiny_model.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()


def test_checkpoint_byte_flips_detected(tmp_path, tiny_model, rng):
    path = tmp_path / "m.ftlm"
    save_checkpoint(tiny_model, path)
    raw = path.read_bytes()
    for pos in rng.choice(len(raw), size=200, replace=False):
        bad = bytearray(raw)
        bad[pos] ^= 1 << int(rng.integers(8))
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_truncated(tmp_path, tiny_model):
    path = tmp_path / "m.ftlm"
    save_checkpoint(tiny_model, path)
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def _rewrite_version(raw: bytes, version: int) -> bytes:
    body = raw[:4] + struct.pack("<I", version) + raw[8:-4]
    return body + struct.pack("<I", zlib.crc32(body))


def test_checkpoint_next_version(tmp_path, tiny_model):
    path = tmp_path / "m.ftlm"
    save_checkpoint(tiny_model, path)
    path.write_bytes(_rewrite_version(path.read_bytes(), 2))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_checkpoint_wrong_kind(tmp_path, tiny_model):
    from desklm.lora import load_adapters

    path = tmp_path / "m.ftlm"
    save_checkpoint(tiny_model, path)
    with pytest.raises(CheckpointError):
        load_adapters(path)


def test_non_finite_logits_rejected(tiny_model):
    w = tiny_model.copy()
    w.params["tok_emb"].data[5, 0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(ContractError):
        forward(w, [5, 6])
