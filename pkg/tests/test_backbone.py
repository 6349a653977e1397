import hashlib

import numpy as np
import pytest
import torch

from mvpersona.backbone import (LATENT_SCALE, build_backbone,
                                checkpoint_digest, clone_state,
                                decode_latents, encode_images,
                                load_checkpoint, parameter_checksum,
                                predict_noise, save_checkpoint)
from mvpersona.config import BackboneConfig
from mvpersona.dataio import synth_scene
from mvpersona.errors import CheckpointVersionError, ConfigError
from mvpersona.rng import torch_generator
from mvpersona.text import encode_text


def test_encode_decode_round_trips_images(raw_backbone):
    scene = synth_scene(0)
    z = encode_images(raw_backbone, scene.images)
    assert z.shape == (4, 4, 32, 32)
    back = decode_latents(raw_backbone, z).numpy()
    # pooled 8x8 blocks reconstruct exactly at block resolution
    pooled = scene.images.reshape(4, 3, 32, 8, 32, 8).mean(axis=(3, 5))
    back_pooled = back.reshape(4, 3, 32, 8, 32, 8).mean(axis=(3, 5))
    assert float(np.abs(back_pooled - pooled).max()) < 1e-9


def test_latent_scale_applied(raw_backbone):
    scene = synth_scene(0)
    z = encode_images(raw_backbone, scene.images)
    # block-averaged unit-range images times the scale bound the latents
    assert float(np.abs(z.numpy()).max()) <= LATENT_SCALE * np.sqrt(3) + 1e-9
    assert float(np.abs(z.numpy()).max()) > 0.5  # not degenerate


def test_decoder_matrix_is_orthonormal(raw_backbone):
    m = raw_backbone.decoder_matrix
    eye = m @ m.T
    assert torch.allclose(eye, torch.eye(3, dtype=torch.float64), atol=1e-12)


def test_build_is_deterministic_and_cached():
    cfg = BackboneConfig(pretrain_steps=2)
    a = build_backbone(cfg, seed=3)
    b = build_backbone(cfg, seed=3)
    assert a is b  # cached object
    c = build_backbone(cfg, seed=3, cache=False)
    assert parameter_checksum(a.predictor) == parameter_checksum(c.predictor)
    d = build_backbone(cfg, seed=4, cache=False)
    assert parameter_checksum(a.predictor) != parameter_checksum(d.predictor)


def test_clone_state_is_independent():
    base = build_backbone(BackboneConfig(pretrain_steps=2), seed=3)
    clone = clone_state(base)
    with torch.no_grad():
        next(clone.predictor.parameters()).add_(1.0)
    assert parameter_checksum(base.predictor) != parameter_checksum(clone.predictor)


def test_prior_predictor_is_frozen_copy():
    state = build_backbone(BackboneConfig(pretrain_steps=2), seed=3)
    assert state.prior_predictor is not state.predictor
    assert parameter_checksum(state.prior_predictor) == \
        parameter_checksum(state.predictor)
    assert all(not p.requires_grad for p in state.prior_predictor.parameters())


def test_predict_noise_enforces_four_views(small_backbone):
    scene = synth_scene(0)
    z = encode_images(small_backbone, scene.images)
    with pytest.raises(ConfigError):
        predict_noise(small_backbone, z[:2], 500, "a photo of dog", scene.poses[:2])


def test_predict_noise_null_condition(small_backbone):
    scene = synth_scene(0)
    z = encode_images(small_backbone, scene.images)
    eps_c, _ = predict_noise(small_backbone, z, 500, "a photo of dog", scene.poses)
    eps_u, _ = predict_noise(small_backbone, z, 500, None, scene.poses)
    assert eps_c.shape == z.shape
    assert not torch.allclose(eps_c, eps_u)


def test_checkpoint_round_trip_bitwise(tmp_path):
    state = build_backbone(BackboneConfig(pretrain_steps=2), seed=3)
    p = str(tmp_path / "ck.npz")
    save_checkpoint(state, p, extra_meta={"note": 1})
    loaded = load_checkpoint(p)
    assert parameter_checksum(loaded.predictor) == parameter_checksum(state.predictor)
    assert parameter_checksum(loaded.text_encoder) == \
        parameter_checksum(state.text_encoder)
    assert torch.equal(loaded.vocab.embeddings, state.vocab.embeddings)
    assert torch.equal(loaded.vocab.frozen_snapshot, state.vocab.frozen_snapshot)
    assert torch.equal(loaded.decoder_matrix, state.decoder_matrix)
    assert loaded.config == state.config
    assert loaded.vocab.learnable_indices == state.vocab.learnable_indices


def test_checkpoint_marked_token_survives(tmp_path):
    state = clone_state(build_backbone(BackboneConfig(pretrain_steps=2), seed=3))
    state.vocab.mark_learnable("dog")
    p = str(tmp_path / "ck.npz")
    save_checkpoint(state, p)
    loaded = load_checkpoint(p)
    assert loaded.vocab.learnable_indices == state.vocab.learnable_indices


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    state = build_backbone(BackboneConfig(pretrain_steps=2), seed=3)
    a, b = str(tmp_path / "a.npz"), str(tmp_path / "b.npz")
    save_checkpoint(state, a, extra_meta={"k": 1})
    save_checkpoint(state, b, extra_meta={"k": 1})
    assert checkpoint_digest(a) == checkpoint_digest(b)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    state = build_backbone(BackboneConfig(pretrain_steps=2), seed=3)
    p = str(tmp_path / "ck.npz")
    save_checkpoint(state, p)
    data = dict(np.load(p, allow_pickle=False))
    import json

    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    meta["format_version"] = 999
    data["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(p, **data)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_parameter_checksum_tracks_changes(raw_backbone):
    before = parameter_checksum(raw_backbone.predictor)
    with torch.no_grad():
        next(raw_backbone.predictor.parameters()).add_(1e-12)
    assert parameter_checksum(raw_backbone.predictor) != before
