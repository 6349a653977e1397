"""Release gate. One test per release criterion, each with its stated
tolerance and runtime budget; every test appends a single [PASS]/[FAIL]
line to the terminal summary. Heavy fixtures (the pretrained backbone, the
default personalization runs) are built once and shared, so a criterion's
measured runtime covers its own work on a warm backbone."""

import json
import time

import numpy as np
import pytest
import torch

from mvpersona import evalkit
from mvpersona.backbone import (build_backbone, clone_state, load_checkpoint,
                                predict_noise)
from mvpersona.config import (Phase1Config, Phase2Config, RenderConfig,
                              RunConfig, SamplerConfig)
from mvpersona.dataio import camera_ring, load_manifest, synth_scene
from mvpersona.errors import DataError
from mvpersona.evalkit import directional_scores_from_embeddings, plan_user_study
from mvpersona.phase1 import (attention_loss_over_views, masked_diffusion_loss,
                              run_phase1)
from mvpersona.pipeline import cmd_edit, cmd_personalize, prepare_batch, \
    rerun_from_record
from mvpersona.rng import substream_seed
from mvpersona.sampler import cfg_predict, compose_source_prompt, sample_views
from mvpersona.schedule import NoiseSchedule, add_noise, ddim_step, ddim_timesteps
from mvpersona.text import encode_text
from mvpersona.unet import forward_views


@pytest.fixture()
def report(request):
    def _report(name, ok, detail, elapsed=None, budget=None):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        if elapsed is not None:
            line += f" [{elapsed:.1f}s of {budget:.0f}s budget]"
        request.config._criterion_lines.append(line)
        assert ok, line
    return _report


def _file_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# 1. directional metric identity and brute-force agreement

def _oracle_scores(orig, edit, t_src, t_edit):
    # naive per-view loops, no shared code with the implementation
    V, _k = orig.shape
    d_txt = [t_edit[j] - t_src[j] for j in range(len(t_src))]
    tn = sum(x * x for x in d_txt) ** 0.5
    dots, coss, mean_dir = [], [], [0.0] * orig.shape[1]
    for v in range(V):
        d = [edit[v][j] - orig[v][j] for j in range(orig.shape[1])]
        dot = sum(a * b for a, b in zip(d, d_txt))
        dn = sum(x * x for x in d) ** 0.5
        dots.append(dot)
        coss.append(dot / (dn * tn))
        for j in range(orig.shape[1]):
            mean_dir[j] += d[j] / V
    mdot = sum(a * b for a, b in zip(mean_dir, d_txt))
    mn = sum(x * x for x in mean_dir) ** 0.5
    return (100 * sum(dots) / V, 100 * sum(coss) / V,
            100 * mdot, 100 * mdot / (mn * tn))


def test_metric_identity_and_oracle(report):
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    max_pair = 0.0
    max_dev = 0.0
    for _ in range(100):
        orig = rng.normal(size=(70, 64))
        edit = rng.normal(size=(70, 64))
        t_src = rng.normal(size=64)
        t_edit = rng.normal(size=64)
        s = directional_scores_from_embeddings(orig, edit, t_src, t_edit)
        max_pair = max(max_pair, abs(s.dir - s.dir_avg))
        o = _oracle_scores(orig, edit, t_src, t_edit)
        for got, want in zip((s.dir, s.dir_cos, s.dir_avg, s.dir_avg_cos), o):
            max_dev = max(max_dev, abs(got - want))
    elapsed = time.monotonic() - t0
    ok = max_pair <= 1e-9 and max_dev <= 1e-9 and elapsed < 5
    report("metric identity", ok,
           f"100 fixtures, max |dir - dir_avg| {max_pair:.2e}, "
           f"max oracle deviation {max_dev:.2e}", elapsed, 5)


# ---------------------------------------------------------------------------
# 2. guidance formula endpoints and affinity

def test_guidance_endpoints_and_affinity(small_backbone, report):
    t0 = time.monotonic()
    state = small_backbone
    poses = camera_ring(RenderConfig())
    gen = torch.Generator().manual_seed(11)
    z = torch.randn(4, state.config.latent_channels,
                    state.config.latent_resolution,
                    state.config.latent_resolution,
                    generator=gen, dtype=torch.float64)
    enc = encode_text("a photo of cat", state.vocab, state.text_encoder)
    with torch.no_grad():
        eps_u, _ = predict_noise(state, z, 500, None, poses)
        eps_c, _ = predict_noise(state, z, 500, enc, poses)
        endpoint0 = torch.equal(cfg_predict(state, z, 500, enc, poses, 0.0), eps_u)
        endpoint1 = torch.equal(cfg_predict(state, z, 500, enc, poses, 1.0), eps_c)
        max_affine = 0.0
        for w_lo, w_hi in ((0.4, 3.6), (2.0, 13.0), (-1.0, 16.0)):
            mid = cfg_predict(state, z, 500, enc, poses, (w_lo + w_hi) / 2)
            avg = (cfg_predict(state, z, 500, enc, poses, w_lo)
                   + cfg_predict(state, z, 500, enc, poses, w_hi)) / 2
            max_affine = max(max_affine, float((mid - avg).abs().max()))
    elapsed = time.monotonic() - t0
    ok = endpoint0 and endpoint1 and max_affine <= 1e-6 and elapsed < 10
    report("guidance formula", ok,
           f"w=0 bitwise {endpoint0}, w=1 bitwise {endpoint1}, "
           f"max affinity deviation {max_affine:.2e}", elapsed, 10)


# ---------------------------------------------------------------------------
# 3. vocabulary preservation under token training

def test_vocabulary_preservation(small_backbone, report):
    t0 = time.monotonic()
    state = clone_state(small_backbone)
    case = load_manifest().by_id(1)
    state.vocab.mark_learnable(case.initializer_token)
    cfg = RunConfig(case_id=1, seed=0)
    batch, _, _ = prepare_batch(state, cfg, compose_source_prompt(case))
    snapshot = state.vocab.frozen_snapshot.clone()
    run_phase1(state, batch, Phase1Config(steps=50), root_seed=0)
    idx = state.vocab.learnable_symbol_index
    rows = state.vocab.embeddings.detach()
    frozen_ok = all(torch.equal(rows[i], snapshot[i])
                    for i in range(rows.shape[0]) if i != idx)
    moved = float(torch.linalg.vector_norm(rows[idx] - snapshot[idx]))
    elapsed = time.monotonic() - t0
    ok = frozen_ok and moved > 0 and elapsed < 60
    report("vocabulary preservation", ok,
           f"50 steps, non-learnable rows bitwise-equal {frozen_ok}, "
           f"learnable row moved L2 {moved:.3e}", elapsed, 60)


# ---------------------------------------------------------------------------
# 4. masked-loss gradient confinement

def test_masked_gradient_confinement(small_backbone, report):
    t0 = time.monotonic()
    cfg = RunConfig(case_id=1, seed=3)
    batch, _, _ = prepare_batch(small_backbone, cfg, "a photo of cat")
    gen = torch.Generator().manual_seed(5)
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(batch.z0.shape, generator=gen,
                          dtype=torch.float64).requires_grad_(True)
    loss = masked_diffusion_loss(eps, eps_hat, batch.masks)
    loss.backward()
    outside = 1.0 - batch.masks.unsqueeze(1)
    analytic_max = float((eps_hat.grad * outside).abs().max())

    rng = np.random.default_rng(17)
    coords = np.argwhere(outside.numpy() > 0)
    picks = coords[rng.choice(len(coords), size=10, replace=False)]
    h = 1e-3
    fd_max = 0.0
    base = eps_hat.detach().clone()
    for v, c, y, x in picks:
        for sign, store in ((+1, "hi"), (-1, "lo")):
            probe = base.clone()
            probe[v, c, y, x] += sign * h
            val = float(masked_diffusion_loss(eps, probe, batch.masks))
            if store == "hi":
                hi = val
            else:
                lo = val
        fd_max = max(fd_max, abs(hi - lo) / (2 * h))
    elapsed = time.monotonic() - t0
    ok = analytic_max == 0.0 and fd_max <= 1e-8 and elapsed < 30
    report("masked-gradient confinement", ok,
           f"analytic grad outside mask max {analytic_max:.1e} (exact 0), "
           f"central-difference max {fd_max:.2e} at 10 coords", elapsed, 30)


# ---------------------------------------------------------------------------
# 5. attention alignment loss gradient vs finite differences

def test_attention_loss_gradient(small_backbone, report):
    t0 = time.monotonic()
    state = clone_state(small_backbone)
    case = load_manifest().by_id(1)
    state.vocab.mark_learnable(case.initializer_token)
    cfg = RunConfig(case_id=1, seed=1)
    batch, _, _ = prepare_batch(state, cfg, compose_source_prompt(case))
    gen = torch.Generator().manual_seed(9)
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=torch.float64)
    z_t = add_noise(batch.z0, 300, eps, state.schedule)

    def attn_loss():
        enc = encode_text(batch.prompt, state.vocab, state.text_encoder,
                          embedding_grad="token")
        _, record = forward_views(state.predictor, z_t, 300, enc, batch.poses,
                                  record_attention=True)
        return attention_loss_over_views(record, enc.learnable_positions,
                                         batch.masks), enc

    loss, enc = attn_loss()
    grad = torch.autograd.grad(loss, state.vocab.embeddings)[0]
    idx = state.vocab.learnable_symbol_index
    row_grad = grad[idx]

    rng = np.random.default_rng(23)
    dims = rng.choice(row_grad.shape[0], size=10, replace=False)
    h = 1e-5
    max_rel = 0.0
    with torch.no_grad():
        for d in dims:
            orig = float(state.vocab.embeddings[idx, d])
            state.vocab.embeddings[idx, d] = orig + h
            hi = float(attn_loss()[0])
            state.vocab.embeddings[idx, d] = orig - h
            lo = float(attn_loss()[0])
            state.vocab.embeddings[idx, d] = orig
            fd = (hi - lo) / (2 * h)
            a = float(row_grad[d])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            max_rel = max(max_rel, rel)
    elapsed = time.monotonic() - t0
    ok = max_rel <= 1e-3 and elapsed < 60
    report("attention-loss gradient", ok,
           f"max relative error vs central differences {max_rel:.2e} "
           "at 10 coordinates", elapsed, 60)


# ---------------------------------------------------------------------------
# 6. training efficacy over three seeds (shared with the determinism check)

EFFICACY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def default_runs(pretrained_backbone, tmp_path_factory):
    """Full-protocol personalization at the default config, once per seed."""
    runs = {}
    t0 = time.monotonic()
    for seed in EFFICACY_SEEDS:
        out = tmp_path_factory.mktemp(f"default_seed{seed}")
        record = cmd_personalize(RunConfig(case_id=1, seed=seed), str(out))
        runs[seed] = (out, record)
    return runs, time.monotonic() - t0


def _window_means(log_path):
    rows = [json.loads(line) for line in open(log_path)]
    vals = [r["loss_masked"] for r in rows]
    assert len(vals) == 400
    return float(np.mean(vals[:50])), float(np.mean(vals[-50:]))


def test_training_efficacy(default_runs, report):
    runs, train_time = default_runs
    sums = {"phase1": [0.0, 0.0], "phase2": [0.0, 0.0]}
    for seed in EFFICACY_SEEDS:
        out, _ = runs[seed]
        for phase in ("phase1", "phase2"):
            first, last = _window_means(out / f"{phase}_log.jsonl")
            sums[phase][0] += first / len(EFFICACY_SEEDS)
            sums[phase][1] += last / len(EFFICACY_SEEDS)
    r1 = sums["phase1"][1] / sums["phase1"][0]
    r2 = sums["phase2"][1] / sums["phase2"][0]
    ok = r1 <= 0.6 and r2 <= 0.6 and train_time < 900
    report("training efficacy", ok,
           f"seed-averaged masked-loss ratio last50/first50: "
           f"phase1 {r1:.3f}, phase2 {r2:.3f} (threshold 0.6)",
           train_time, 900)


# ---------------------------------------------------------------------------
# 7. view-count leakage trend on the asymmetric scene

def test_janus_leakage_trend(pretrained_backbone, tmp_path, report):
    t0 = time.monotonic()
    leak = {1: [], 4: []}
    for seed in EFFICACY_SEEDS:
        for views in (1, 4):
            cfg = RunConfig(case_id=1, seed=seed)
            cfg.ablation.run_phase1 = False  # leakage is a fine-tuning effect
            cfg.ablation.views_per_batch = views
            out = tmp_path / f"v{views}_s{seed}"
            cmd_personalize(cfg, str(out))
            state = load_checkpoint(str(out / "checkpoint.npz"))
            case = load_manifest().by_id(cfg.case_id)
            scene = synth_scene(substream_seed(cfg.seed, "scene"), cfg.render)
            images, _, _ = sample_views(state, compose_source_prompt(case),
                                        cfg.sampler,
                                        seed=substream_seed(cfg.seed, "edit"))
            score = evalkit.leakage_score(
                list(zip(scene.poses, images.detach().numpy())), scene.params)
            leak[views].append(score)
    gap = float(np.mean(leak[1]) - np.mean(leak[4]))
    elapsed = time.monotonic() - t0
    ok = gap >= 0.25 and elapsed < 2700
    report("single-view leakage trend", ok,
           f"mean leakage views=1 {np.mean(leak[1]):.3f}, views=4 "
           f"{np.mean(leak[4]):.3f}, gap {gap:.3f} (need >= 0.25)",
           elapsed, 2700)


# ---------------------------------------------------------------------------
# 8. byte-identical re-runs from run records

def test_rerun_determinism(default_runs, tmp_path, report):
    t0 = time.monotonic()
    runs, _ = default_runs
    out0, _ = runs[0]
    redo = tmp_path / "personalize_again"
    rerun_from_record(str(out0 / "run_record.json"), str(redo))
    ckpt_same = _file_bytes(out0 / "checkpoint.npz") == \
        _file_bytes(redo / "checkpoint.npz")

    edit1 = tmp_path / "edit"
    cmd_edit(str(out0 / "checkpoint.npz"), str(edit1), case_id=1, seed=0)
    edit2 = tmp_path / "edit_again"
    rerun_from_record(str(edit1 / "run_record.json"), str(edit2))
    views_same = all(
        _file_bytes(edit1 / f"view_{k}.png") == _file_bytes(edit2 / f"view_{k}.png")
        for k in range(4))
    elapsed = time.monotonic() - t0
    ok = ckpt_same and views_same and elapsed < 1200
    report("re-run determinism", ok,
           f"checkpoint byte-identical {ckpt_same}, "
           f"all four view images byte-identical {views_same}", elapsed, 1200)


# ---------------------------------------------------------------------------
# 9. protocol exactness: defaults, camera ring, manifest, study plan

MANIFEST_ROWS = [
    (1, 'a photo of basket', 'a photo of basket with apples in it',
     'basket', 'basket'),
    (2, 'a photo of cake', 'a photo of cake in a plate',
     'cake', 'cake'),
    (3, 'a photo of cheetah', 'a photo of cheetah lying on the floor',
     'cheetah', 'cheetah'),
    (4, 'a photo of dog', 'a photo of dog as a cat',
     'dog', 'dog'),
    (5, 'a photo of dog', 'a photo of dog as a pig',
     'dog', 'dog'),
    (6, 'a photo of dog', 'a photo of dog smile',
     'dog', 'dog'),
    (7, 'a photo of eagle', 'a photo of two eagle together',
     'eagle', 'eagle'),
    (8, 'a photo of plant', 'a photo of plant as sunflower',
     'plant', 'plant'),
    (9, 'a photo of sofa', 'a photo of sofa redesigned to single seat',
     'sofa', 'sofa'),
    (10, 'a photo of house', 'a photo of house covered with snow',
     'house', 'house'),
    (11, 'a photo of shoes', 'a photo of shoes in red',
     'shoes', 'shoes'),
    (12, 'a photo of shoes', 'a photo of two shoes as a pair',
     'shoes', 'shoes'),
    (13, 'a photo of person', 'a photo of person wearing sunglasses',
     'person', 'person'),
    (14, 'a photo of person', 'a photo of person smile with teeth',
     'person', 'person'),
    (15, 'a photo of a robot', 'a photo of robot sitting',
     'robot', 'robot'),
    (16, 'a photo of a boat', 'a photo of boat as houseboat',
     'boat', 'boat'),
    (17, 'a photo of a boat', 'a photo of boat with sails',
     'boat', 'boat'),
    (18, 'a photo of van', 'a photo of van in red',
     'van', 'van'),
    (19, 'a photo of van', 'a photo of van as a car',
     'van', 'van'),
    (20, 'a photo of van', 'a photo of van as convertible sports car',
     'van', 'van'),
    (21, 'a photo of lady', 'a photo of lady with her child',
     'lady', 'lady'),
    (22, 'a photo of lady', 'a photo of lady ride a white horse',
     'lady', 'lady'),
    (23, 'a photo of lady', 'a photo of lady wearing blue T-shirt',
     'lady', 'lady'),
    (24, 'a photo of lady', 'a photo of lady sitting',
     'lady', 'lady'),
    (25, 'a photo of koala', 'a photo of koala in lego style',
     'koala', 'koala'),
]


def test_protocol_exactness(report):
    t0 = time.monotonic()
    problems = []
    p1, p2, sam, ren = Phase1Config(), Phase2Config(), SamplerConfig(), RenderConfig()
    for name, got, want in [
        ("phase1.steps", p1.steps, 400),
        ("phase1.learning_rate", p1.learning_rate, 5e-4),
        ("phase1.attention_weight", p1.attention_weight, 1e-2),
        ("phase2.steps", p2.steps, 400),
        ("phase2.learning_rate", p2.learning_rate, 2e-6),
        ("phase2.prior_weight", p2.prior_weight, 1.0),
        ("sampler.guidance_scale", sam.guidance_scale, 7.5),
        ("sampler.num_steps", sam.num_steps, 50),
        ("render.num_views", ren.num_views, 4),
        ("render.elevation_deg", ren.elevation_deg, 15.0),
        ("render.azimuth_start_deg", ren.azimuth_start_deg, 90.0),
    ]:
        if got != want:
            problems.append(f"{name}={got!r} != {want!r}")

    ring = camera_ring(70)
    if len(ring) != 70:
        problems.append(f"ring length {len(ring)}")
    for k, pose in enumerate(ring):
        if abs(pose.azimuth_deg - (90.0 + 360.0 * k / 70) % 360.0) > 1e-12 \
                or pose.elevation_deg != 15.0:
            problems.append(f"ring pose {k} off protocol")
            break

    cases = load_manifest().cases
    got_rows = [(c.id, c.source_prompt, c.edit_prompt, c.edit_slot,
                 c.initializer_token) for c in cases]
    if got_rows != MANIFEST_ROWS:
        problems.append("manifest differs from the 25 reference cases")

    plan = plan_user_study(seed=0)
    total = plan.total_judgments()
    coverage = min(plan.coverage.values())
    if total != 600:
        problems.append(f"study judgments {total} != 600")
    if coverage < 8:
        problems.append(f"min coverage {coverage} < 8")
    elapsed = time.monotonic() - t0
    ok = not problems
    report("protocol exactness", ok,
           "defaults, 70-view ring, 25-case manifest, and 600-judgment "
           "study plan all match" if ok else "; ".join(problems),
           elapsed, 10)


# ---------------------------------------------------------------------------
# 10. deterministic sampler round trip with oracle noise

def test_ddim_round_trip(report):
    t0 = time.monotonic()
    schedule = NoiseSchedule(T=1000)
    gen = torch.Generator().manual_seed(31)
    z0 = torch.randn(4, 4, 32, 32, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 4, 32, 32, generator=gen, dtype=torch.float64)
    ts = ddim_timesteps(1000, 50)
    z = add_noise(z0, ts[0], eps, schedule)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        z = ddim_step(z, eps, t, t_prev, schedule)
    err = float((z - z0).abs().max())
    elapsed = time.monotonic() - t0
    ok = err <= 1e-5 and elapsed < 10
    report("round trip", ok,
           f"50-step chain with oracle noise, max |z - z0| {err:.2e}",
           elapsed, 10)
