import pytest
import torch

from sidrec.config import PipelineConfig
from sidrec.dedup import sinkhorn_dedup
from sidrec.quantizer import build_item_arrays, item_latents, train_quantizer
from sidrec.recommender import train_recommender
from sidrec.synth import SynthSpec, synth_generate
from sidrec.trie import SidTrie


def small_config(**overrides) -> PipelineConfig:
    base = dict(
        n_levels=3,
        codebook_size=16,
        code_dim=8,
        d_content=32,
        d_collab=8,
        enc_hidden=(64, 32),
        d_model=32,
        n_enc_layers=1,
        n_dec_layers=1,
        n_heads=2,
        head_dim=16,
        d_ff=64,
        d_proj=16,
        d_moe=32,
        quantizer_epochs=8,
        recommender_epochs=3,
        batch_size=64,
        valid_user_limit=40,
        seed=7,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return small_config()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    spec = SynthSpec(d_content=tiny_cfg.d_content, d_collab=tiny_cfg.d_collab)
    corpus, features = synth_generate(tiny_cfg.seed, 300, 80, 3, 3, spec)
    return corpus, features.normalized(tiny_cfg.n_levels)


@pytest.fixture(scope="session")
def trained_quantizer(tiny_cfg, tiny_data):
    corpus, features = tiny_data
    model, sid_map, history = train_quantizer(corpus, features, tiny_cfg)
    return model, sid_map, history


@pytest.fixture(scope="session")
def dedup_result(tiny_cfg, tiny_data, trained_quantizer):
    corpus, features = tiny_data
    model, sid_map, _ = trained_quantizer
    items, batch = build_item_arrays(corpus, features, tiny_cfg.n_levels)
    latents = item_latents(model, items, batch)
    assignment = sinkhorn_dedup(sid_map, latents, model.codebooks.codes.numpy())
    return assignment, latents


@pytest.fixture(scope="session")
def sid_trie(dedup_result):
    assignment, _ = dedup_result
    return SidTrie.build(assignment.sid_map)


@pytest.fixture(scope="session")
def trained_recommender(tiny_cfg, tiny_data, trained_quantizer, dedup_result, sid_trie):
    corpus, features = tiny_data
    quant_model, _, _ = trained_quantizer
    assignment, _ = dedup_result
    model, history = train_recommender(
        corpus, features, assignment.sid_map, sid_trie, tiny_cfg,
        codebooks=quant_model.codebooks.codes.clone(),
    )
    return model, history


def finite_diff_grads(value_fn, params, h=1e-6):
    """Central-difference gradients of a scalar function of in-place parameters."""
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(value_fn())
                flat[i] = orig - h
                down = float(value_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(grad)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
