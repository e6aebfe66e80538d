import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from longview.thvae import (
    CheckpointError,
    ConfigurationError,
    Decode,
    Mode,
    NumericError,
    ResidualCell1,
    ResidualCell2,
    ThVae,
    ThVaeConfig,
    TrainingInstabilityError,
    UntrainedModelError,
    Vocabulary,
    attention_weights,
    elbo,
    encode_keyphrases,
    encode_segment,
    encode_timeline,
    gaussian_kl,
    generate_summary,
    hierarchy_forward,
    kl_weight,
    load_checkpoint,
    save_checkpoint,
    token_accuracy,
    train,
)
from longview.thvae.model import adaptive_pool
from longview.timeline import segment_timeline

from .conftest import make_timeline, micro_model

TOY = ["i feel alone today", "my friends came over", "school was hard again", "i slept well"]


def _gru_step_oracle(gru, x):
    """One GRU step from the zero state, written out gate by gate."""
    W, b_i, b_h = gru.weight_ih_l0, gru.bias_ih_l0, gru.bias_hh_l0
    d = gru.hidden_size
    gi = W @ x + b_i
    r = torch.sigmoid(gi[:d] + b_h[:d])
    z = torch.sigmoid(gi[d:2 * d] + b_h[d:2 * d])
    n = torch.tanh(gi[2 * d:] + r * b_h[2 * d:])
    return (1 - z) * n


# --- key-phrase encoding and attention ---------------------------------------

def test_empty_phrases_give_default_vector():
    m = micro_model()
    v = encode_keyphrases([], m)
    assert torch.equal(v, m.default_phrase_vector)
    assert torch.equal(v, encode_keyphrases([], m))


def test_single_phrase_is_one_gru_step():
    m = micro_model()
    with torch.no_grad():
        v = encode_keyphrases(["feel alone"], m)
        e = m.embedding(torch.tensor(m.vocabulary.encode("feel alone"))).mean(0)
        assert torch.allclose(v, _gru_step_oracle(m.phrase_gru, e), atol=1e-6)


def test_phrase_order_matters():
    m = micro_model()
    with torch.no_grad():
        assert not torch.allclose(encode_keyphrases(["i feel", "friends came"], m),
                                  encode_keyphrases(["friends came", "i feel"], m))


def _unit(theta):
    return [math.cos(theta), math.sin(theta)]


@pytest.mark.parametrize("cosines,expected", [
    ([0.5, 0.5], [0.5, 0.5]),
    ([0.8, 0.2], [0.8, 0.2]),
    ([0.5, -0.5], [1.0, 0.0]),
])
def test_attention_examples(cosines, expected):
    v = torch.tensor([1.0, 0.0], dtype=torch.float64)
    words = torch.tensor([_unit(math.acos(c)) for c in cosines], dtype=torch.float64) * 3.0
    alpha = attention_weights(v, words)
    assert alpha.tolist() == pytest.approx(expected, abs=1e-7)


def test_attention_zero_v_is_error():
    with pytest.raises(NumericError):
        attention_weights(torch.zeros(4), torch.randn(3, 4))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 512), st.integers(0, 2**31 - 1))
def test_attention_normalised(m, seed):
    g = torch.Generator().manual_seed(seed)
    alpha = attention_weights(torch.randn(6, generator=g) + 0.01, torch.randn(m, 6, generator=g))
    assert abs(float(alpha.sum()) - 1.0) <= 1e-6
    assert bool((alpha >= 0).all())


# --- segment and timeline encoding ---------------------------------------------

def test_encode_segment_shapes_and_single_token():
    m = micro_model()
    with torch.no_grad():
        enc = encode_segment("i feel alone today", ["alone"], m)
        assert enc.word_weights.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert enc.segment_encoding.shape == (m.config.latent_dim,)
        one = encode_segment("alone", ["alone"], m)
        w = m.embedding(torch.tensor(m.vocabulary.encode("alone")))
        assert torch.allclose(one.weighted_embedding_sequence, w)


def test_duplicate_token_doubles_mass():
    m = micro_model(texts=("a b c",))
    with torch.no_grad():
        single = encode_segment("a b", ["c"], m).word_weights
        double = encode_segment("a a b", ["c"], m).word_weights
    ratio_single = single[0] / single[1]
    ratio_double = (double[0] + double[1]) / double[2]
    assert float(ratio_double) == pytest.approx(2 * float(ratio_single), rel=1e-5)


def test_empty_segment_rejected():
    with pytest.raises(ValueError):
        encode_segment("   ", None, micro_model())


def _timeline_states(m, k):
    g = torch.Generator().manual_seed(k)
    enc = torch.randn(k, m.config.latent_dim, generator=g)
    out, _ = m.timeline_gru(enc.unsqueeze(0))
    return enc, out[0]


@pytest.mark.parametrize("factor", ["one", "L", "2L"])
def test_timeline_pooling(factor):
    m = micro_model()
    L = m.config.pooled_length
    k = {"one": 1, "L": L, "2L": 2 * L}[factor]
    with torch.no_grad():
        enc, states = _timeline_states(m, k)
        pooled = m.encode_timeline_states(enc)
    assert pooled.shape == (L, m.config.latent_dim)
    if k == 1:
        expected = states.expand(L, -1)
    elif k == L:
        expected = states
    else:
        expected = torch.stack([(states[2 * j] + states[2 * j + 1]) / 2 for j in range(L)])
    assert torch.allclose(pooled, expected, atol=1e-6)


def test_encode_timeline_functional():
    m = micro_model()
    with torch.no_grad():
        encs = [encode_segment(t, None, m) for t in TOY[:3]]
        pooled = encode_timeline(encs, m)
    assert pooled.shape == (m.config.pooled_length, m.config.latent_dim)
    with pytest.raises(ValueError):
        encode_timeline([], m)


# --- latent hierarchy ----------------------------------------------------------

def test_hierarchy_structure_and_determinism():
    m = micro_model().eval()
    x = torch.randn(m.config.pooled_length, m.config.latent_dim)
    with torch.no_grad():
        h1 = hierarchy_forward(x, m, Mode.POSTERIOR, deterministic=True)
        h2 = hierarchy_forward(x, m, Mode.POSTERIOR, deterministic=True)
        p1 = hierarchy_forward(None, m, Mode.PRIOR, deterministic=True)
        p2 = hierarchy_forward(None, m, Mode.PRIOR, deterministic=True)
    assert len(h1.layers) == m.config.num_latents
    assert torch.equal(h1.memory, h2.memory) and torch.equal(p1.memory, p2.memory)
    for lay in h1.layers:
        assert torch.equal(lay.z, lay.mu)
    assert h1.memory.shape == (1, m.config.num_latents + m.config.pooled_length, m.config.latent_dim)


def test_hierarchy_bad_shape_and_nan_layer():
    m = micro_model().eval()
    with pytest.raises(ConfigurationError):
        hierarchy_forward(torch.randn(3, 8), m)
    with torch.no_grad():
        m.posterior_heads[1].bias.fill_(float("nan"))
    with pytest.raises(TrainingInstabilityError) as info:
        hierarchy_forward(torch.randn(4, 8), m)
    assert info.value.layer == 1


# --- residual cells ---------------------------------------------------------------

def _param_count_oracle(C, k, mul, r, multi):
    h = max(C // r, 4)
    bn = 2 * C
    conv = C * C * k + C
    se = (C * h + h) + (h * C + C)
    bank = sum(C * C * kk + C for kk in mul) if multi else 0
    return bn + conv + se + bank


@pytest.mark.parametrize("cls", [ResidualCell1, ResidualCell2])
def test_cells_zero_init_identity_and_jacobian(cls):
    torch.manual_seed(0)
    cell = cls(8, zero_init=True).double()
    x = torch.randn(2, 8, 11, dtype=torch.float64, requires_grad=True)
    y = cell(x)
    assert torch.equal(y, x)
    # central differences of sum(y) at a few coordinates
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 3, 5), (0, 7, 10)]:
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += eps
        xm[idx] -= eps
        with torch.no_grad():
            fd = (cell(xp).sum() - cell(xm).sum()) / (2 * eps)
        assert float(fd) == pytest.approx(1.0, abs=1e-6)
    y.sum().backward()
    assert torch.allclose(x.grad, torch.ones_like(x))


@pytest.mark.parametrize("kernels", [(3,), (3, 5, 7)])
def test_cells_shape_and_param_counts(kernels):
    C = 16
    c1, c2 = ResidualCell1(C, 3, kernels), ResidualCell2(C, 3)
    x = torch.randn(2, C, 9)
    assert c1(x).shape == x.shape and c2(x).shape == x.shape
    n1 = sum(p.numel() for p in c1.parameters())
    n2 = sum(p.numel() for p in c2.parameters())
    assert n1 == _param_count_oracle(C, 3, kernels, 16, True)
    assert n2 == _param_count_oracle(C, 3, kernels, 16, False)
    assert n2 < n1


def test_cell_channel_mismatch():
    with pytest.raises(ConfigurationError):
        ResidualCell1(8)(torch.randn(1, 4, 5))
    with pytest.raises(ConfigurationError):
        ResidualCell2(8, kernel=4)


# --- ELBO -----------------------------------------------------------------------

def test_gaussian_kl_identities():
    z, o = torch.zeros(5), torch.ones(5)
    assert torch.equal(gaussian_kl(z, z, z, z), torch.zeros(5))
    assert torch.allclose(gaussian_kl(o, z, z, z), torch.full((5,), 0.5))
    mu, lv = torch.randn(5), torch.randn(5)
    assert torch.equal(gaussian_kl(mu, lv, mu, lv), torch.zeros(5))


@settings(max_examples=300, deadline=None)
@given(*[st.floats(-30, 30, allow_nan=False) for _ in range(4)])
def test_gaussian_kl_nonnegative(mq, lq, mp, lp):
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    assert float(gaussian_kl(t(mq), t(lq), t(mp), t(lp))) >= 0.0


def test_elbo_posterior_equal_prior_gives_zero_kl():
    m = micro_model().eval()
    ids = m.segment_token_ids(TOY[0])
    with torch.no_grad():
        enc = encode_segment(TOY[0], None, m)
        hier = hierarchy_forward(adaptive_pool(enc.hidden_states, 4), m)
        for lay in hier.layers:
            lay.mu, lay.log_var = lay.prior_mu.clone(), lay.prior_log_var.clone()
        terms = m.elbo_from_hierarchy(m.make_batch([(ids, [])]), hier, 1.0)
    assert torch.equal(terms.kl_per_layer, torch.zeros(m.config.num_latents))
    assert terms.total_loss == terms.reconstruction_nll


def test_elbo_uniform_logits_nll_is_log_v():
    m = micro_model().eval()
    V = len(m.vocabulary)
    with torch.no_grad():
        m.output.weight.zero_()
        m.output.bias.zero_()
        ids = m.segment_token_ids(TOY[1])
        terms = elbo(ids, encode_segment(TOY[1], None, m), m, beta=0.5, deterministic=True)
    assert float(terms.reconstruction_nll) / (len(ids) + 1) == pytest.approx(math.log(V), rel=1e-6)
    # random small logits stay within 5% of ln V
    with torch.no_grad():
        torch.manual_seed(1)
        m.output.bias.normal_(0, 0.05)
        terms = elbo(ids, encode_segment(TOY[1], None, m), m, beta=0.0, deterministic=True)
    assert float(terms.reconstruction_nll) / (len(ids) + 1) == pytest.approx(math.log(V), rel=0.05)
    with pytest.raises(ValueError):
        elbo(ids, encode_segment(TOY[1], None, m), m, beta=1.5)


# --- training ---------------------------------------------------------------------

def test_kl_schedule():
    assert kl_weight(0, 0) == 1.0
    assert kl_weight(5, 10) == 0.5
    assert kl_weight(50, 10) == 1.0


def test_toy_training_reduces_loss_and_is_reproducible(tmp_path):
    corpus = [(t, None) for t in TOY]
    runs = []
    for _ in range(2):
        m = micro_model(texts=TOY, learning_rate=2e-3)
        runs.append(train(corpus, m, steps=300, seed=3, batch_size=4,
                          checkpoint_path=tmp_path / "toy.ckpt"))
    rep = runs[0]
    assert len(rep.records) == 300 and len(rep.epochs) == 300
    assert rep.final_loss < rep.initial_loss
    assert [r["total"] for r in runs[0].records] == [r["total"] for r in runs[1].records]
    assert (tmp_path / "toy.ckpt").exists()
    assert rep.records[0]["beta"] == 0.0


def test_zero_warmup_uses_full_beta():
    m = micro_model(texts=TOY, kl_warmup_steps=0)
    rep = train([(t, None) for t in TOY], m, steps=3, batch_size=2)
    assert all(r["beta"] == 1.0 for r in rep.records)


def test_training_divergence_restores_last_good(monkeypatch):
    m = micro_model(texts=TOY)
    corpus = [(t, None) for t in TOY]
    train(corpus, m, steps=4, batch_size=4)
    good = {k: v.clone() for k, v in m.state_dict().items()}
    calls = [0]
    original = ThVae.batch_elbo

    def flaky(self, *a, **k):
        calls[0] += 1
        if calls[0] == 3:
            raise TrainingInstabilityError("boom")
        return original(self, *a, **k)

    monkeypatch.setattr(ThVae, "batch_elbo", flaky)
    with pytest.raises(TrainingInstabilityError):
        train(corpus, m, steps=10, batch_size=2)
    after = m.state_dict()
    # two steps made up one full epoch, so that epoch's state is the last good one
    assert any(not torch.equal(good[k], after[k]) for k in good if after[k].is_floating_point())
    with pytest.raises(ValueError):
        train([], m, steps=1)


def test_divergence_before_any_epoch_restores_initial(monkeypatch):
    m = micro_model(texts=TOY)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    original = ThVae.batch_elbo
    calls = [0]

    def flaky(self, *a, **k):
        calls[0] += 1
        if calls[0] == 2:
            raise TrainingInstabilityError("boom")
        return original(self, *a, **k)

    monkeypatch.setattr(ThVae, "batch_elbo", flaky)
    with pytest.raises(TrainingInstabilityError):
        train([(t, None) for t in TOY], m, steps=10, batch_size=1)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_token_accuracy():
    assert token_accuracy([5, 6], [5, 6], 2) == 1.0
    assert token_accuracy([5], [5, 6], 2) == pytest.approx(1 / 3)
    assert token_accuracy([], [], 2) == 1.0


# --- generation and checkpoints ----------------------------------------------------

def _trained():
    tl = make_timeline(["0", "0", "IS", "IE", "0"], TOY + ["back to normal"])
    m = micro_model(texts=TOY + ["back to normal"])
    train([(s, None) for s in segment_timeline(tl)], m, steps=5, batch_size=4)
    return tl, m


def test_generate_summary_contract():
    tl = make_timeline(["0", "IS"], TOY[:2])
    fresh = micro_model(texts=TOY)
    with pytest.raises(UntrainedModelError):
        generate_summary(tl, [None, None], fresh)
    tl, m = _trained()
    kps = [None] * len(segment_timeline(tl))
    a = generate_summary(tl, kps, m)
    b = generate_summary(tl, kps, m)
    assert a == b and a.text
    assert len(m.vocabulary.encode(a.text)) <= 512
    s1 = generate_summary(tl, kps, m, Decode.sampled(4))
    assert s1 == generate_summary(tl, kps, m, Decode.sampled(4))
    with pytest.raises(ValueError):
        generate_summary(tl, kps[:1], m)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    tl, m = _trained()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.training_step_count == m.training_step_count
    assert m2.vocabulary.tokens == m.vocabulary.tokens and m2.config == m.config
    for k, v in m.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k]), k
    x = torch.randn(4, 8)
    with torch.no_grad():
        assert torch.equal(hierarchy_forward(x, m.eval()).memory, hierarchy_forward(x, m2).memory)
    kps = [None] * len(segment_timeline(tl))
    assert generate_summary(tl, kps, m) == generate_summary(tl, kps, m2)

    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ThVaeConfig(latent_dim=8, embedding_dim=16)
    with pytest.raises(ConfigurationError):
        ThVaeConfig.micro(conv_mul_kernels=(3, 4))
    with pytest.raises(ConfigurationError):
        ThVaeConfig.micro(num_latents=0)
    cfg = ThVaeConfig()
    assert (cfg.num_latents, cfg.cells_per_block, cfg.decoder_layers, cfg.learning_rate,
            cfg.embedding_dim) == (5, 3, 6, 5e-4, 768)
    with pytest.raises(ConfigurationError):
        ThVae(ThVaeConfig.micro(), Vocabulary.build(["a"], 16))


def test_vocabulary_roundtrip():
    v = Vocabulary.build(["I feel alone, today.", "today"], 8)
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.decode(v.encode("i feel alone, today.")) == "i feel alone, today."
    assert v.encode("zebra") == [v.unk_id]
