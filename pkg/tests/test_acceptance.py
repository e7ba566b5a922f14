"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

The corridor pipeline (collect, pretrain, train, merge, plus the never-jumping
agent) is trained once per session with the default configuration and seed 0,
exactly as ``protox demo`` would. Expect roughly 15 minutes on a CPU.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch

import conftest
from protox import demonstrations as D
from protox.config import PipelineConfig, substream_seed
from protox.corridor import Action, BadExpert, CorridorEnv, scenario_kind
from protox.diagnostics import jump_weight_violations, run_diagnosis, select_probes
from protox.evaluation import evaluate, fidelity
from protox.explanation import nearest_overlay
from protox.model import ProtoXModel, evidence, init_model, iso_penalty, similarity
from protox.pretrain import Encoder, encode_dataset, mine_quadruplet, pretrain_encoder, quadruplet_loss, separation_stats
from protox.training import (
    ObjectiveWeights,
    TrainConfig,
    ce_term,
    clst_term,
    merge_prototypes,
    project_prototypes,
    rep_term,
    sep_term,
    total_objective,
    train_bc,
)


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- independent scalar oracles (plain Python floats, no torch) --------------------


def o_sqdist(u, v):
    return sum((a - b) ** 2 for a, b in zip(u, v))


def o_dist(u, v):
    return math.sqrt(o_sqdist(u, v))


def o_matvec(A, v):
    return [sum(A[i][j] * v[j] for j in range(len(v))) for i in range(len(A))]


def o_quadruplet(a, p, n, nn, m1, m2):
    dap = o_sqdist(a, p)
    return max(dap - o_sqdist(a, n) + m1, 0.0) + max(dap - o_sqdist(n, nn) + m2, 0.0)


def o_evidence(sims, W):
    return [sum(W[k][a] * sims[k] for k in range(len(sims))) for a in range(len(W[0]))]


def o_iso(A):
    d = len(A)
    total = 0.0
    for i in range(d):
        for j in range(d):
            ata = sum(A[k][i] * A[k][j] for k in range(d))
            total += (ata - (1.0 if i == j else 0.0)) ** 2
    return total


def o_terms(Z, y, A, P, tags, W, beta):
    emb = [o_matvec(A, z) for z in Z]
    ce = sep = clst = 0.0
    for e, label in zip(emb, y):
        d = [o_dist(e, p) for p in P]
        ev = o_evidence([math.exp(-beta * x) for x in d], W)
        mx = max(ev)
        ce += mx + math.log(sum(math.exp(v - mx) for v in ev)) - ev[label]
        sep += min(d[k] for k in range(len(P)) if tags[k] != label)
        clst += min(d[k] for k in range(len(P)) if tags[k] == label)
    rep = sum(min(o_sqdist(e, p) for e in emb) for p in P)
    n = len(Z)
    return ce / n, -sep / n, clst / n, rep


def _model(A, P, tags, W, beta=0.05):
    m = ProtoXModel(len(A), tags, tuple(f"a{i}" for i in range(len(W[0]))), beta)
    with torch.no_grad():
        m.A.copy_(torch.tensor(A, dtype=torch.float64))
        m.prototypes.copy_(torch.tensor(P, dtype=torch.float64))
        m.W.copy_(torch.tensor(W, dtype=torch.float64))
    return m


# --- 1 ---------------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = {k: 0.0 for k in ("quadruplet", "ce", "sep", "clst", "rep", "iso", "similarity", "evidence")}
    n_inst = 120
    for _ in range(n_inst):
        D_, n_act, K, n = int(rng.integers(1, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 9))
        tags = np.repeat(np.arange(n_act), K)
        A = (np.eye(D_) + 0.2 * rng.normal(size=(D_, D_))).tolist()
        P = rng.normal(size=(len(tags), D_)).tolist()
        W = rng.normal(size=(len(tags), n_act)).tolist()
        Z = rng.normal(size=(n, D_)).tolist()
        y = rng.integers(0, n_act, size=n).tolist()
        m = _model(A, P, tags, W)
        batch = (torch.tensor(Z, dtype=torch.float64), np.array(y))
        ce, sep, clst, rep = o_terms(Z, y, A, P, tags, W, 0.05)
        worst["ce"] = max(worst["ce"], abs(ce_term(batch, m).item() - ce))
        worst["sep"] = max(worst["sep"], abs(sep_term(batch, m).item() - sep))
        worst["clst"] = max(worst["clst"], abs(clst_term(batch, m).item() - clst))
        worst["rep"] = max(worst["rep"], abs(rep_term(np.array(Z), m).item() - rep))
        worst["iso"] = max(worst["iso"], abs(iso_penalty(m.A).item() - o_iso(A)))
        q = rng.normal(size=(4, D_))
        m1, m2 = float(rng.uniform(0, 2)), float(rng.uniform(0, 2))
        got = quadruplet_loss(*(torch.from_numpy(v) for v in q), m1, m2).item()
        worst["quadruplet"] = max(worst["quadruplet"], abs(got - o_quadruplet(*q.tolist(), m1, m2)))
        z, p = rng.normal(size=D_) * 5, rng.normal(size=D_) * 5
        beta = float(rng.uniform(0.01, 1.0))
        got = similarity(torch.from_numpy(z), torch.from_numpy(p), beta).item()
        worst["similarity"] = max(worst["similarity"], abs(got - math.exp(-beta * o_dist(z.tolist(), p.tolist()))))
        sims = rng.random(len(tags))
        got = evidence(torch.from_numpy(sims), torch.tensor(W, dtype=torch.float64)).numpy()
        worst["evidence"] = max(worst["evidence"], max(abs(a - b) for a, b in zip(got, o_evidence(sims.tolist(), W))))
    elapsed = time.time() - t0
    ok = max(worst.values()) <= 1e-6 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("criterion 1 oracle equivalence", ok, f"{n_inst} instances each, max |diff| {detail} (tol 1e-6), {elapsed:.1f}s")


# --- 2 ---------------------------------------------------------------------------------


def _kink_gap(m, Z, y):
    """Smallest distance to a kink of the objective: ties in a min, or a zero distance."""
    with torch.no_grad():
        d = m.distances(Z).numpy()
        emb = m.embed(Z).numpy()
    P = m.prototypes.detach().numpy()
    gaps = [d.min()]
    for i, label in enumerate(y):
        for mask in (m.proto_actions == label, m.proto_actions != label):
            v = np.sort(d[i, mask])
            if len(v) > 1:
                gaps.append(v[1] - v[0])
    sq = ((P[:, None, :] - emb[None]) ** 2).sum(-1)
    for row in sq:
        v = np.sort(row)
        gaps.append(v[1] - v[0])
    return min(gaps)


def test_criterion_2_gradient_check():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst, checked = 0.0, 0
    while checked < 5:
        tags = [0, 0, 1, 1]
        A = np.eye(4) + 0.2 * rng.normal(size=(4, 4))
        m = _model(A.tolist(), rng.normal(size=(4, 4)).tolist(), tags, rng.normal(size=(4, 2)).tolist())
        Z, y = torch.from_numpy(rng.normal(size=(8, 4))), rng.integers(0, 2, size=8)
        if _kink_gap(m, Z, y) < 1e-3:
            continue
        base = [m.A.detach().clone(), m.prototypes.detach().clone(), m.W.detach().clone()]

        def f(params):
            with torch.no_grad():
                for dst, src in zip((m.A, m.prototypes, m.W), params):
                    dst.copy_(src)
            return total_objective((Z, y), m, ObjectiveWeights(), rep_sample=Z.numpy())

        m.zero_grad()
        f(base).backward()
        auto = torch.cat([m.A.grad.flatten(), m.prototypes.grad.flatten(), m.W.grad.flatten()])
        num = []
        for w, b in enumerate(base):
            for idx in np.ndindex(*b.shape):
                hi, lo = [x.clone() for x in base], [x.clone() for x in base]
                hi[w][idx] += 1e-6
                lo[w][idx] -= 1e-6
                num.append((f(hi).item() - f(lo).item()) / 2e-6)
        num = torch.tensor(num, dtype=torch.float64)
        worst = max(worst, ((num - auto).norm() / num.norm()).item())
        checked += 1
    elapsed = time.time() - t0
    record("criterion 2 gradient check", worst <= 1e-4 and elapsed < 60,
           f"full objective, D=4 K=2 |A|=2 batch 8, {checked} instances, max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s")


# --- 3 ---------------------------------------------------------------------------------


def test_criterion_3_projection_and_merging():
    t0 = time.time()
    rng = np.random.default_rng(303)
    D_, n = 6, 60
    lat = rng.normal(size=(n, D_))
    lat[30:] = lat[:30]  # duplicated states force shared sources
    index = np.stack([np.repeat([0, 1], n // 2), np.tile(np.arange(n // 2), 2)], 1)
    tags = np.repeat(np.arange(3), 8)
    m = _model((np.eye(D_) + 0.1 * rng.normal(size=(D_, D_))).tolist(), rng.normal(size=(24, D_)).tolist(), tags,
               rng.normal(size=(24, 3)).tolist())
    project_prototypes(m, lat, index)
    emb = lat @ m.A.detach().numpy().T
    P = m.prototypes.detach().numpy()
    rows = [int(np.flatnonzero((index == s).all(1))[0]) for s in m.source_index]
    max_gap = max(np.linalg.norm(P[k] - emb[r]) for k, r in enumerate(rows))
    nearest_gap = max(np.linalg.norm(emb - P[k], axis=1).min() for k in range(len(P)))
    before = (P.copy(), m.source_index.copy())
    again = project_prototypes(m, lat, index)
    idempotent = np.array_equal(before[0], m.prototypes.detach().numpy()) and np.array_equal(before[1], m.source_index)
    merged, rep = merge_prototypes(m)
    z = rng.normal(size=(100, D_))
    with torch.no_grad():
        diff = np.abs(m(z)[0].numpy() - merged(z)[0].numpy()).max()
    elapsed = time.time() - t0
    ok = max_gap <= 1e-6 and nearest_gap <= 1e-6 and idempotent and again.moved == 0 and diff <= 1e-5 and elapsed < 60
    record("criterion 3 projection and merging", ok,
           f"max |p - A f(source)| {max_gap:.1e}, re-projection moved {again.moved}, merge {rep.before}->{rep.after} "
           f"with max evidence change {diff:.1e} over 100 states (tol 1e-5)")


# --- 4 ---------------------------------------------------------------------------------


def test_criterion_4_near_isometry_bound():
    t0 = time.time()
    rng = np.random.default_rng(404)
    d = 32
    results = []
    for delta in (0.0, 0.1, 0.5):
        U, _ = np.linalg.qr(rng.normal(size=(d, d)))
        V, _ = np.linalg.qr(rng.normal(size=(d, d)))
        s2 = rng.uniform(1 - delta, 1 + delta, size=d)
        s2[0], s2[-1] = 1 + delta, 1 - delta
        A = U @ np.diag(np.sqrt(s2)) @ V.T
        measured = np.linalg.norm(A.T @ A - np.eye(d), 2)
        z, zp = rng.normal(size=(1000, d)), rng.normal(size=(1000, d))
        lhs = (((z - zp) @ A.T) ** 2).sum(1)
        rhs = (1 + delta) * ((z - zp) ** 2).sum(1)
        ok = bool((lhs <= rhs * (1 + 1e-12)).all()) and abs(measured - delta) < 1e-9
        results.append((delta, ok, float((lhs / rhs).max())))
    elapsed = time.time() - t0
    record("criterion 4 near-isometry bound", all(r[1] for r in results) and elapsed < 10,
           "; ".join(f"delta {dl}: max ratio {mx:.4f} <= 1" for dl, _, mx in results) + f", 1000 pairs each, {elapsed:.2f}s")


# --- shared corridor pipeline --------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline():
    cfg = PipelineConfig()
    seed = 0
    t0 = time.time()
    env = lambda s: CorridorEnv(cfg.corridor(seed=s))
    ds = D.collect(env, cfg.expert(), cfg.data.n_pairs, substream_seed(seed, "collect"), cfg.data.stack_depth)
    train, test = D.split(ds, cfg.data.train_fraction, substream_seed(seed, "split"))
    t_collect = time.time() - t0
    encoder, _ = pretrain_encoder(train, cfg.encoder_config(), cfg.miner_config(),
                                  cfg.pretrain_config(substream_seed(seed, "pretrain")))
    t_pretrain = time.time() - t0 - t_collect
    latents = encode_dataset(encoder, train)

    def fit(data, lat, stream):
        m = init_model(lat, data.actions, data.action_set, cfg.train.initial_K,
                       substream_seed(seed, stream + "-init"), cfg.train.beta, encoder)
        m.dataset_hash = data.content_hash()
        m, hist = train_bc(m, lat, data.actions, data.index, cfg.objective_weights(),
                           cfg.train_config(substream_seed(seed, stream)))
        return m, hist

    model, history = fit(train, latents, "train")
    merged, merge_report = merge_prototypes(model)
    t_total = time.time() - t0

    bad_ds = D.collect(env, BadExpert(cfg.env.lookahead), cfg.data.n_pairs, substream_seed(seed, "collect-bad"),
                       cfg.data.stack_depth)
    bad_train, bad_test = D.split(bad_ds, cfg.data.train_fraction, substream_seed(seed, "split-bad"))
    bad_model, _ = fit(bad_train, encode_dataset(encoder, bad_train), "train-bad")
    bad_merged, _ = merge_prototypes(bad_model)
    return dict(cfg=cfg, train=train, test=test, encoder=encoder, latents=latents, model=model, merged=merged,
                history=history, merge_report=merge_report, bad_train=bad_train, bad_test=bad_test,
                bad=bad_merged, times=(t_collect, t_pretrain, t_total))


# --- 5 ---------------------------------------------------------------------------------


def test_criterion_5_corridor_benchmark(pipeline):
    train, test, merged = pipeline["train"], pipeline["test"], pipeline["merged"]
    report = evaluate(merged, test)
    rep = pipeline["merge_report"]
    minutes = pipeline["times"][2] / 60
    ce = [r["ce"] for r in pipeline["history"]["epochs"]]
    lines = [
        ("criterion 5a fidelity", report.fidelity >= 0.90,
         f"held-out fidelity {report.fidelity:.4f} on {report.n_test} states (need >= 0.90); train pairs {len(train)}"),
        ("criterion 5b flip-point sensitivity", report.sensitivity >= 0.80,
         f"sensitivity {report.sensitivity:.4f} over {report.n_flip} flip points (need >= 0.80)"),
        ("criterion 5c merged prototype count", rep.before == 100 and rep.after <= 25,
         f"{rep.before} initial -> {rep.after} merged (need <= 25); CE {ce[0]:.3f} -> {ce[-1]:.4f}; "
         f"pipeline {minutes:.1f} min CPU (limit 120)"),
    ]
    failures = []
    for name, ok, detail in lines:
        try:
            record(name, ok and minutes <= 120 and len(train) >= 10_000, detail)
        except AssertionError as exc:
            failures.append(str(exc))
    assert not failures, failures


# --- 6 ---------------------------------------------------------------------------------


def test_criterion_6_pretraining_separation(pipeline):
    stats = separation_stats(pipeline["encoder"], pipeline["test"], pipeline["cfg"].miner_config(), n=500, seed=606)
    ap, an = stats["anchor_positive"], stats["anchor_near_negative"]
    margin = (an - ap) / an
    minutes = pipeline["times"][1] / 60
    record("criterion 6 pre-training separation", stats["n"] == 500 and ap < an and margin >= 0.10 and minutes <= 10,
           f"held-out anchor-positive {ap:.3f} vs anchor-near-negative {an:.3f}, margin {100 * margin:.1f}% "
           f"(need >= 10%) on {stats['n']} quadruplets; pre-training {minutes:.1f} min")


# --- 7 ---------------------------------------------------------------------------------


def test_criterion_7_scenario_similarity(pipeline):
    t0 = time.time()
    cfg, train, test, merged, lat = (pipeline[k] for k in ("cfg", "train", "test", "merged", "latents"))
    env_cfg = cfg.corridor()
    first, inverse = train.unique_states()
    uniq_frames = train.states(first)
    kinds = np.array([scenario_kind(f[0], env_cfg) or "" for f in uniq_frames])
    pipe_jump = set(first[(kinds == "pipe") & (train.actions[first] == Action.JUMP)].tolist())
    probes, seen = [], set()
    for r in select_probes(test):
        s = test.states([r])[0]
        if scenario_kind(s[0], env_cfg) == "hole" and s.tobytes() not in seen:
            seen.add(s.tobytes())
            probes.append(int(r))
    hits_iso = hits_raw = 0
    for r in probes:
        ov = nearest_overlay(merged, test.state(r), train, 30, use_isometry=True, latents=lat)
        hits_iso += bool(pipe_jump & set(ov.rows.tolist()))
        ov = nearest_overlay(merged.encoder, test.state(r), train, 30, use_isometry=False, latents=lat)
        hits_raw += bool(pipe_jump & set(ov.rows.tolist()))
    rate = hits_iso / len(probes) if probes else 0.0
    elapsed = time.time() - t0
    record("criterion 7 scenario similarity", len(probes) > 0 and rate >= 0.70 and elapsed < 60,
           f"{hits_iso}/{len(probes)} distinct hole-jump probes have a pipe-jump state among their 30 nearest distinct "
           f"states by A f(x) ({100 * rate:.0f}%, need >= 70%; by f(x): {hits_raw}/{len(probes)}); "
           f"{len(first)} distinct training states, {len(pipe_jump)} of them pipe-jump")


# --- 8 ---------------------------------------------------------------------------------


def test_criterion_8_determinism_and_round_trips(pipeline, tmp_path):
    t0 = time.time()
    cfg = pipeline["cfg"]
    env = lambda s: CorridorEnv(cfg.corridor(seed=s))
    a = D.collect(env, cfg.expert(), 1500, seed=88)
    b = D.collect(env, cfg.expert(), 1500, seed=88)
    same_data = a == b
    sa, sb = D.split(a, 0.8, 5), D.split(b, 0.8, 5)
    same_split = sa[0] == sb[0] and sa[1] == sb[1]
    miner = cfg.miner_config()
    qa = [mine_quadruplet(a, tuple(x), miner, np.random.default_rng(9)) for x in a.index[:200].tolist()]
    qb = [mine_quadruplet(b, tuple(x), miner, np.random.default_rng(9)) for x in b.index[:200].tolist()]
    same_quads = qa == qb

    train, lat, enc = pipeline["train"], pipeline["latents"], pipeline["encoder"]
    short = TrainConfig(epochs=2, projection_period=1, seed=11, initial_K=5)
    runs = []
    for _ in range(2):
        m = init_model(lat, train.actions, train.action_set, 5, seed=12, encoder=enc)
        m, _ = train_bc(m, lat, train.actions, train.index, cfg.objective_weights(), short)
        runs.append(m.source_index.copy())
    same_sources = np.array_equal(*runs)

    D.save(pipeline["test"], tmp_path / "t.ptxd")
    back = D.load(tmp_path / "t.ptxd")
    D.save(back, tmp_path / "t2.ptxd")
    data_rt = back == pipeline["test"] and (tmp_path / "t.ptxd").read_bytes() == (tmp_path / "t2.ptxd").read_bytes()
    pipeline["merged"].save(tmp_path / "m.ptxm")
    mb = ProtoXModel.load(tmp_path / "m.ptxm")
    mb.save(tmp_path / "m2.ptxm")
    model_rt = (tmp_path / "m.ptxm").read_bytes() == (tmp_path / "m2.ptxm").read_bytes() and all(
        torch.equal(getattr(mb, k), getattr(pipeline["merged"], k)) for k in ("A", "prototypes", "W"))
    enc.save(tmp_path / "e.ptxe")
    Encoder.load(tmp_path / "e.ptxe").save(tmp_path / "e2.ptxe")
    enc_rt = (tmp_path / "e.ptxe").read_bytes() == (tmp_path / "e2.ptxe").read_bytes()
    elapsed = time.time() - t0
    checks = dict(datasets=same_data, splits=same_split, quadruplets=same_quads, sources=same_sources,
                  dataset_file=data_rt, model_file=model_rt, encoder_file=enc_rt)
    record("criterion 8 determinism and round-trips", all(checks.values()) and elapsed < 120,
           ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()) + f", {elapsed:.1f}s")


# --- 9 ---------------------------------------------------------------------------------


def test_criterion_9_flip_point_oracle():
    t0 = time.time()
    rng = np.random.default_rng(909)
    mismatches = 0
    for _ in range(1000):
        acts = rng.integers(0, int(rng.integers(1, 5)), size=int(rng.integers(1, 201))).tolist()
        traj = D.Trajectory(np.zeros((len(acts), 1, 1, 3), np.uint8), np.array(acts), 0)
        brute = []
        for t in range(1, len(acts)):
            if acts[t] != acts[t - 1]:
                brute.append(t)
        mismatches += [t for _, t in D.find_flip_points(traj)] != brute
    elapsed = time.time() - t0
    record("criterion 9 flip-point oracle", mismatches == 0 and elapsed < 5,
           f"{mismatches} mismatches over 1000 random action sequences, {elapsed:.2f}s")


# --- 10 --------------------------------------------------------------------------------


def test_criterion_10_diagnosis(pipeline):
    t0 = time.time()
    cfg, train, test, good, bad = (pipeline[k] for k in ("cfg", "train", "test", "merged", "bad"))
    violations = jump_weight_violations(bad)
    bad_fid = fidelity(bad, pipeline["bad_test"])
    env_cfg = cfg.corridor()
    probes = select_probes(test)
    localized, cited_jump, cache = [], 0, {}
    for r in probes:
        key = test.states([r]).tobytes()
        if key not in cache:
            cache[key] = run_diagnosis(good, bad, test.state(int(r)), train, pipeline["bad_train"], env_cfg)
        b = cache[key]
        localized.append(b.good.localized)
        cited_jump += b.bad.source_action == Action.JUMP
    rate = float(np.mean(localized)) if localized else 0.0
    elapsed = time.time() - t0
    failures = []
    for name, ok, detail in [
        ("criterion 10a bad agent has no positive JUMP weights", len(violations) == 0,
         f"{len(violations)} of {bad.n_prototypes} merged prototypes with weight toward JUMP > 1e-8"),
        ("criterion 10a bad agent explanations", bad_fid >= 0.95 and cited_jump == 0,
         f"fidelity to the never-jumping expert {bad_fid:.4f} (need >= 0.95); "
         f"{cited_jump}/{len(probes)} probes cite a JUMP source state (need 0)"),
        ("criterion 10b good agent importance localizes on obstacles", len(probes) > 0 and rate >= 0.80 and elapsed < 300,
         f"{sum(localized)}/{len(localized)} probes ({100 * rate:.0f}%, need >= 80%) with the importance maximum "
         f"inside an obstacle box; {len(cache)} distinct probe states, {elapsed:.0f}s"),
    ]:
        try:
            record(name, ok, detail)
        except AssertionError as exc:
            failures.append(str(exc))
    assert not failures, failures
