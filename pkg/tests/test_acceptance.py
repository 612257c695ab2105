"""End-to-end acceptance checks; each test records one pass/fail line for the summary."""
import json
import math
import time

import numpy as np
import pytest

from gradcheck import check, check_params
from test_tensor_core import _random_gradcases
from tbm import anomaly as an
from tbm import preprocess as pp
from tbm import rate
from tbm.anomaly import LatentDistribution
from tbm.cli import main
from tbm.tensor import Tensor, exp

TOL = 1e-9


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default simulate + preprocess for both tasks, run twice in separate directories."""
    runs = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(f"default_{name}")
        data = root / "data"
        (root / "sim.json").write_text(json.dumps({"out_dir": str(data)}))
        assert main(["simulate", "--config", str(root / "sim.json"), "--seed", "0"]) == 0
        pre = {"geology": str(data / "geology.csv"), "labels": str(data / "labels.json")}
        (root / "pre.json").write_text(json.dumps(pre))
        for task in ("rate", "anomaly"):
            assert main(["preprocess", "--config", str(root / "pre.json"), "--task", task]) == 0
        runs.append(data)
    return runs


def run_cli(tmp, command, cfg, *flags):
    path = tmp / f"{command}.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *flags])


@pytest.fixture(scope="module")
def rate_run(default_run, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rate")
    data = default_run[0] / "rate"
    start = time.perf_counter()
    assert run_cli(tmp, "train-rate", {"data_dir": str(data), "checkpoint": str(data / "model.json")}) == 0
    assert run_cli(tmp, "eval-rate", {"data_dir": str(data), "checkpoint": str(data / "model.json")}) == 0
    return json.loads((data / "eval.json").read_text()), time.perf_counter() - start


@pytest.fixture(scope="module")
def anomaly_run(default_run, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("anomaly")
    data, labels = default_run[0] / "anomaly", default_run[0] / "labels.json"
    cfg = {"data_dir": str(data), "labels": str(labels), "checkpoint": str(data / "model.json")}
    start = time.perf_counter()
    assert run_cli(tmp, "train-anomaly", cfg) == 0
    assert run_cli(tmp, "detect", cfg) == 0
    return json.loads((data / "detect.json").read_text()), time.perf_counter() - start


# -- 1: loss closed forms ------------------------------------------------------------

def test_criterion_1_loss_closed_forms(acceptance_line):
    def kl(mu, var):
        return float(an.kl_loss(LatentDistribution(Tensor([mu]), Tensor([math.log(var)]))).data)

    checks = {
        "smooth_l1(0.5)": (float(rate.smooth_l1_loss(Tensor([0.5]), Tensor([0.0])).data), 0.125),
        "smooth_l1(-3)": (float(rate.smooth_l1_loss(Tensor([-3.0]), Tensor([0.0])).data), 2.5),
        "KL(1,1)": (kl(1.0, 1.0), 0.5),
        "KL(0,2)": (kl(0.0, 2.0), 0.5 * (1 - math.log(2))),
        "BCE(0.5,0.5)": (float(an.bce_loss(Tensor([0.5]), [0.5]).data), math.log(2)),
    }
    worst = max(abs(got - want) for got, want in checks.values())
    acceptance_line(1, worst < TOL, f"max abs error {worst:.1e} over {len(checks)} closed forms")
    assert worst < TOL, checks


# -- 2: gradient suite ------------------------------------------------------------------

def test_criterion_2_gradient_suite(acceptance_line):
    start = time.perf_counter()
    worst = {}
    for point in range(10):
        for layer, (build, arrays) in _random_gradcases(np.random.default_rng(100 + point)).items():
            worst[layer] = max(worst.get(layer, 0.0), check(build, arrays))
        rng = np.random.default_rng(200 + point)
        cfg = rate.RateModelConfig(window_len=7, channels=[3, 4], kernel=3, attention_reduction=2, dropout_p=0.0)
        model = rate.build_rate_model(cfg, 2, seed=point)
        for prm in model.parameters():
            prm.data[...] = rng.normal(scale=0.5, size=prm.shape)
        x, y = rng.normal(size=(2, 2, 7)), Tensor(rng.normal(size=(2, 1)))
        err = check_params(lambda: rate.smooth_l1_loss(model.forward(x), y), model.parameters())
        worst["rate model"] = max(worst.get("rate model", 0.0), err)

        vcfg = an.VaeModelConfig(seq_len=3, lstm_hidden=2, latent_dim=2, decoder_hidden=3)
        vae = an.build_vae(vcfg, 2, 1, seed=point)
        for prm in vae.parameters():
            prm.data[...] = rng.normal(scale=0.5, size=prm.shape)
        xe, xg, eps = rng.uniform(size=(2, 3, 2)), rng.uniform(size=(2, 3, 1)), rng.standard_normal((2, 2))

        def vae_loss():
            d = an.encode(xe, xg, vae)
            z = d.mu + exp(d.log_var * 0.5) * Tensor(eps)
            return an.total_loss(an.bce_loss(an.decode(z, vae), xe), an.kl_loss(d))

        worst["vae model"] = max(worst.get("vae model", 0.0), check_params(vae_loss, vae.parameters()))
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    passed = top < 1e-4 and elapsed < 30
    acceptance_line(2, passed, f"max rel error {top:.1e} across {len(worst)} checks, {elapsed:.1f}s")
    assert passed, worst


# -- 3: preprocessing invariants ----------------------------------------------------------

def test_criterion_3_preprocessing_invariants(acceptance_line):
    rng = np.random.default_rng(7)
    x = rng.normal(40.0, 12.0, size=500)
    z, mean, std = pp.zscore_normalize(x)
    m, lo, hi = pp.minmax_normalize(x)
    lognormal = np.random.default_rng(12345).lognormal(size=1000)
    _, lam = pp.boxcox(lognormal)
    sizes = tuple(len(s) for s in pp.split_dataset(list(range(400))))
    results = {
        "zscore mean": abs(z.mean()) < 1e-12,
        "zscore std": abs(z.std(ddof=1) - 1) < 1e-12,
        "minmax range": m.min() >= 0 and m.max() <= 1,
        "minmax roundtrip": np.abs(m * (hi - lo) + lo - x).max() < 1e-12,
        "boxcox lambda": -0.25 <= lam <= 0.25,
        "split 280/80/40": sizes == (280, 80, 40),
    }
    passed = all(results.values())
    acceptance_line(3, passed, f"lambda={lam:.2f}, split={sizes}, failing={[k for k, v in results.items() if not v]}")
    assert passed, results


# -- 4: rate task end to end -------------------------------------------------------------

def test_criterion_4_rate_end_to_end(rate_run, acceptance_line):
    scores, elapsed = rate_run
    passed = scores["r2"] >= 0.90 and scores["mse"] <= 0.02
    acceptance_line(4, passed, f"test R2={scores['r2']:.4f}, MSE={scores['mse']:.5f}, {elapsed:.0f}s")
    assert passed, scores


# -- 5: ablation direction -----------------------------------------------------------------

def test_criterion_5_geology_ablation_direction(default_run, acceptance_line):
    data = default_run[0] / "rate"
    manifest = pp.read_manifest(data / "manifest.json")
    samples = pp.read_rate_csv(data / "fused.csv")
    feats = np.stack([s.features for s in samples])
    targets = np.array([s.target for s in samples])
    cells = [(True, "attention+residual"), (False, "attention+residual")]
    start = time.perf_counter()
    rows = rate.run_ablation(rate.RateModelConfig(), feats, targets, manifest.excavation_columns, cells=cells)
    elapsed = time.perf_counter() - start
    on = next(r for r in rows if r["geology"])
    off = next(r for r in rows if not r["geology"])
    passed = on["r2"] >= off["r2"]
    acceptance_line(5, passed, f"geology-on R2={on['r2']:.4f} vs geology-off R2={off['r2']:.4f}, {elapsed:.0f}s")
    assert passed, rows


# -- 6: anomaly task end to end -----------------------------------------------------------

def test_criterion_6_anomaly_end_to_end(default_run, anomaly_run, acceptance_line):
    report, elapsed = anomaly_run
    labels = json.loads((default_run[0] / "labels.json").read_text())
    assert len(labels["fault_windows"]) == 114
    passed = report["detection_rate"] >= 0.95 and report["false_positive_rate"] <= 0.05
    by_kind = ", ".join(f"{k} {v:.2f}" for k, v in report["detection_rate_by_kind"].items())
    acceptance_line(
        6,
        passed,
        f"detection={report['detection_rate']:.3f}, FPR={report['false_positive_rate']:.3f}; by kind: {by_kind}; {elapsed:.0f}s",
    )
    assert passed, report


# -- 7: VAE properties ----------------------------------------------------------------------

def test_criterion_7_vae_properties(acceptance_line):
    rng = np.random.default_rng(0)
    mu, lv = rng.uniform(-5, 5, size=(10_000, 1)), rng.uniform(-10, 10, size=(10_000, 1))
    kl_ok = all(
        float(an.kl_loss(LatentDistribution(Tensor(mu[i]), Tensor(lv[i]))).data) >= 0 for i in range(len(mu))
    )
    cfg = an.VaeModelConfig(seq_len=8, lstm_hidden=6, latent_dim=3, decoder_hidden=8)
    model = an.build_vae(cfg, 4, 2, seed=1)
    xe, xg = rng.uniform(size=(20, 8, 4)), rng.uniform(size=(20, 8, 2))
    s1, s2 = an.score_windows(model, xe, xg), an.score_windows(model, xe, xg)
    deterministic = s1.tobytes() == s2.tobytes()
    flagged = [{v.window_index for v in an.verdicts(s1, t) if v.is_anomaly} for t in np.sort(np.r_[s1, s1.min() - 1])]
    monotone = all(b <= a for a, b in zip(flagged, flagged[1:]))
    passed = kl_ok and deterministic and monotone
    acceptance_line(7, passed, f"KL>=0 on 1e4 points={kl_ok}, bit-identical scoring={deterministic}, monotone={monotone}")
    assert passed


# -- 8: determinism ----------------------------------------------------------------------------

def test_criterion_8_determinism(default_run, rate_run, anomaly_run, tmp_path, acceptance_line):
    first, second = default_run
    artifacts = ["geology.csv", "excavation.csv", "excavation_faulty.csv", "labels.json"]
    artifacts += [f"{t}/{f}" for t in ("rate", "anomaly") for f in ("fused.csv", "manifest.json")]
    for task, command in (("rate", "train-rate"), ("anomaly", "train-anomaly")):
        cfg = {"data_dir": str(second / task), "checkpoint": str(second / task / "model.json")}
        if task == "anomaly":
            cfg["labels"] = str(second / "labels.json")
        assert run_cli(tmp_path, command, cfg) == 0
        artifacts += [f"{task}/model.json", f"{task}/model_report.json"]
    differing = [a for a in artifacts if (first / a).read_bytes() != (second / a).read_bytes()]
    passed = not differing
    acceptance_line(8, passed, f"{len(artifacts) - len(differing)}/{len(artifacts)} artifacts byte-identical")
    assert passed, differing
