"""Acceptance criteria 1-7. Each test prints one ``criterion N: PASS|FAIL`` line, then asserts."""

import json
import time

import numpy as np
import pytest

from fairscl.contrastive import GROUP_AWARE, build_pairs, loss_and_grad
from fairscl.dataset import SyntheticConfig, generate_synthetic, ingest_table
from fairscl.experiment import ExperimentConfig, run_experiment
from fairscl.metrics import ScoredSet, delta, marginal_auc, relative_change
from fairscl.nnet import TRAINERS, TrainConfig, bce_loss_grad, init_model, load_checkpoint, save_checkpoint
from fairscl.report import dataset_schema, emit_table_dataset
from fairscl.stats import bootstrap, logistic_fit, paired_t_test
from oracles import brute_marginal_auc, brute_pairs, central_diff, rel_err, two_by_two
from reference_tables import ABS_TOL, AGE_DELTA, AGE_MAUC, CHANGE_ROWS, REL_TOL_PP

# gradient entries below this magnitude are judged on absolute error; FD round-off is ~1e-9
FD_FLOOR = 1e-4


def _verdict(capsys, n, ok, detail, elapsed, budget):
    ok = ok and elapsed < budget
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s / {budget:g}s]")
    return ok


def test_criterion_1_marginal_auc_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, checked = 0.0, 0
    while checked < 500:
        n = int(rng.integers(2, 201))
        k = int(rng.integers(2, 5))
        scores = rng.integers(0, 50, n) / 49.0 if rng.random() < 0.5 else rng.random(n)
        labels = rng.integers(0, 2, n)
        groups = rng.choice([f"g{i}" for i in range(k)], n)
        if labels.min() == labels.max():
            continue
        s = ScoredSet(scores, labels, {"g": groups})
        defined = [c for c in s.categories("g") if ((groups == c) & (labels == 1)).any()]
        if not defined:
            continue
        for c in defined:
            worst = max(worst, abs(marginal_auc(s, "g", c) - brute_marginal_auc(scores, labels, groups, c)))
        checked += 1
    age = round(delta(AGE_MAUC), 4)
    ok = worst <= 1e-12 and age == AGE_DELTA
    ok = _verdict(capsys, 1, ok, f"500 sets, max |err| {worst:.1e}; age delta {age}",
                  time.perf_counter() - t0, 10)
    assert ok


def test_criterion_2_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)

    emb_worst = 0.0
    for _ in range(100):
        while True:
            y = rng.integers(0, 2, 8)
            g = rng.choice(["a", "b"], 8)
            ps = build_pairs(y, g, GROUP_AWARE)
            if len(ps):
                break
        z = rng.normal(size=(8, 16))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        _, grad = loss_and_grad(z, 0.05, ps)
        fd = central_diff(lambda: loss_and_grad(z, 0.05, ps)[0], z, h=1e-5)
        emb_worst = max(emb_worst, rel_err(grad, fd, floor=FD_FLOOR))

    net_worst = 0.0
    for trial in range(100):
        state = init_model(4, hidden=(6, 5), embed_dim=3, seed=trial)
        for k, a in state.params.items():
            state.params[k] = rng.normal(scale=0.7, size=a.shape)
        X = rng.normal(size=(6, 4))
        y = rng.integers(0, 2, 6)
        _, grads = bce_loss_grad(state, X, y)
        for k, a in state.params.items():
            fd = central_diff(lambda: bce_loss_grad(state, X, y)[0], a, h=1e-5)
            net_worst = max(net_worst, rel_err(grads.get(k, np.zeros_like(a)), fd, floor=FD_FLOOR))

    ok = emb_worst <= 1e-5 and net_worst <= 1e-4
    ok = _verdict(capsys, 2, ok,
                  f"embeddings max rel err {emb_worst:.1e} (<=1e-5); all parameters {net_worst:.1e} (<=1e-4)",
                  time.perf_counter() - t0, 30)
    assert ok


def test_criterion_3_pair_rule(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        y = rng.integers(0, 2, n).tolist()
        g = rng.choice(["a", "b", "c"], n).tolist()
        got = {p.anchor: (p.positives, p.negatives) for p in build_pairs(y, g, GROUP_AWARE)}
        mismatches += got != brute_pairs(y, g, GROUP_AWARE)
    # male COVID+, female COVID+, male COVID-, female COVID-
    ps = build_pairs([1, 1, 0, 0], ["male", "female", "male", "female"], GROUP_AWARE)
    anchor = [p for p in ps if p.anchor == 0][0]
    figure_ok = anchor.positives == (1,) and anchor.negatives == (2,)
    ok = mismatches == 0 and figure_ok
    ok = _verdict(capsys, 3, ok, f"1000 batches, {mismatches} mismatches; four-record example {figure_ok}",
                  time.perf_counter() - t0, 5)
    assert ok


def test_criterion_4_statistics(capsys):
    t0 = time.perf_counter()
    a, b, c, d = 40, 10, 20, 30
    fit = logistic_fit(*two_by_two(a, b, c, d))
    or_err = abs(fit.odds_ratios[1] - 6.0)
    se_err = abs(fit.std_errors[1] - np.sqrt(1 / a + 1 / b + 1 / c + 1 / d))
    tt = paired_t_test(np.arange(1.0, 6.0), np.zeros(5))
    t_err, p_err = abs(tt.t - 4.2426), abs(tt.p - 0.0132)

    class Const:
        def __len__(self):
            return 30

        def take(self, idx):
            return self

    ci = bootstrap(lambda s: 0.42, Const(), B=200, seed=0)
    width = ci.ci_high - ci.ci_low
    ok = or_err <= 1e-6 and se_err <= 1e-6 and t_err <= 1e-3 and p_err <= 1e-3 and width == 0.0
    ok = _verdict(capsys, 4, ok,
                  f"OR err {or_err:.1e}, se err {se_err:.1e}, t {tt.t:.4f}, p {tt.p:.4f}, CI width {width}",
                  time.perf_counter() - t0, 5)
    assert ok


def test_criterion_5_change_table(capsys):
    t0 = time.perf_counter()
    bad = []
    for ds, attr, metric, base, prop, rel, ab in CHANGE_ROWS:
        c = relative_change(base, prop)
        if abs(c["relative_pct"] - rel) > REL_TOL_PP or abs(c["absolute"] - ab) > ABS_TOL:
            bad.append(f"{ds}/{attr}/{metric}: got {c['relative_pct']:.2f}% {c['absolute']:+.4f}, "
                       f"reported {rel:.2f}% {ab:+.4f}")
    detail = f"{len(CHANGE_ROWS) - len(bad)}/{len(CHANGE_ROWS)} rows reproduced"
    if bad:
        detail += "; mismatches: " + " | ".join(bad)
    ok = _verdict(capsys, 5, not bad, detail, time.perf_counter() - t0, 1)
    assert ok


@pytest.mark.slow
def test_criterion_6_bias_reduction(capsys):
    t0 = time.perf_counter()
    rows = []
    for seed in range(10):
        cfg = ExperimentConfig(synthetic=SyntheticConfig(), methods=("erm", "proposed"), bootstrap=200,
                               seed=seed, test_fraction=0.2)
        rep = run_experiment(cfg, write=False)
        r = rep.results
        erm = r["erm"]["group"]["bootstrap"]
        prop = r["proposed"]["group"]["bootstrap"]
        tt = rep.t_tests["group"]["erm"]
        auc_drop = (erm["overall_auc"]["point"] - prop["overall_auc"]["point"]) / erm["overall_auc"]["point"]
        win = prop["d_mauc"]["point"] < erm["d_mauc"]["point"] and tt["mean_diff"] < 0 and tt["p"] < 0.05
        rows.append((seed, erm["d_mauc"]["point"], prop["d_mauc"]["point"], tt["p"], auc_drop,
                     win and auc_drop <= 0.05))
    wins = sum(r[-1] for r in rows)
    summary = ", ".join(f"s{s}: {e:.3f}->{p:.3f} p={pv:.0e} auc{-d:+.1%}" for s, e, p, pv, d, _ in rows)
    ok = _verdict(capsys, 6, wins >= 8, f"{wins}/10 seeds ({summary})", time.perf_counter() - t0, 300)
    assert ok


def test_criterion_7_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = dict(synthetic=SyntheticConfig(n=1000), methods=("erm", "balanced", "adv", "scl", "proposed"),
               train=TrainConfig(pretrain_epochs=2, finetune_epochs=1, learning_rate=1e-3), bootstrap=50,
               formats=("json", "markdown", "delimited"), seed=4)
    texts = []
    out = tmp_path / "run"
    out.mkdir()
    for _ in range(2):
        # same output directory both times: the report records out_dir in its config
        run_experiment(ExperimentConfig(out_dir=str(out), **cfg))
        d = json.loads((out / "report.json").read_text())
        d["provenance"].pop("timestamp")
        texts.append((json.dumps(d, sort_keys=True), (out / "report.md").read_bytes(),
                      (out / "report.csv").read_bytes(), (out / "dataset.csv").read_bytes()))
    reports_same = texts[0] == texts[1]

    ds = generate_synthetic(SyntheticConfig(n=500), 11)
    emit_table_dataset(ds, tmp_path / "d.csv")
    back = ingest_table(tmp_path / "d.csv", dataset_schema(ds))
    data_same = back.equals(ds) and back.features.tobytes() == ds.features.tobytes()

    state = TRAINERS["proposed"](ds, TrainConfig(pretrain_epochs=1, learning_rate=1e-3))
    save_checkpoint(state, tmp_path / "m.bin")
    loaded = load_checkpoint(tmp_path / "m.bin")
    ck_same = loaded.digest() == state.digest() and loaded.step == state.step and all(
        np.array_equal(loaded.m[k], state.m[k]) and np.array_equal(loaded.v[k], state.v[k]) for k in state.params
    )
    ok = reports_same and data_same and ck_same
    ok = _verdict(capsys, 7, ok, f"reports identical {reports_same}; dataset {data_same}; checkpoint {ck_same}",
                  time.perf_counter() - t0, 60)
    assert ok
