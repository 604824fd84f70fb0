"""Smoke test for the osslab_py extension module."""

import math
import random
import tempfile

import osslab_py as ol


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok   {what}")


def main():
    p = ol.BetaParams(2.0, 2.0)
    check(abs(p.pdf(0.5) - 1.5) < 1e-12, "Beta(2,2) density at 0.5")

    fit, clamped = ol.method_of_moments(0.8, 0.01)
    check(abs(fit.alpha - 12) < 1e-9 and abs(fit.beta - 3) < 1e-9 and not clamped, "moment fit (0.8, 0.01)")
    check(ol.weighted_moments([0.2, 0.8], [1, 1]) == (0.5, 0.09000000000000001) or
          abs(ol.weighted_moments([0.2, 0.8], [1, 1])[1] - 0.09) < 1e-15, "weighted moments")

    means = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    check(abs(ol.subspace_score([3.0, -2.0, 0.0], means) - 1.0) < 1e-12, "in-span score is 1")
    check(abs(ol.subspace_score([0.0, 0.0, 5.0], means)) < 1e-12, "orthogonal score is 0")
    check(abs(ol.subspace_score([1.0, 0.0, 1.0], means) - 1 / math.sqrt(2)) < 1e-12, "45 degree score")

    check(ol.auroc([0.9, 0.8], [0.1, 0.8]) == 0.875, "auroc with a tie")
    check(abs(ol.learning_rate(2000) - 0.03) < 1e-15, "learning rate at end of warm-up")

    rng = random.Random(0)
    scores = [rng.betavariate(10, 2) if rng.random() < 0.5 else rng.betavariate(2, 10) for _ in range(2000)]
    mix, converged = ol.fit_mixture(scores, pi=0.5)
    check(converged and mix.id.mean() > 0.7 and mix.ood.mean() < 0.3, f"mixture fit {mix!r}")
    check(mix.posterior(0.95) > 0.99 and mix.posterior(0.05) < 0.01, "posterior ordering")

    online = ol.BetaMixture(pi=0.5, epsilon=0.1, momentum=0.9)
    for i in range(0, 2000, 128):
        online.step(scores[i:i + 128])
    check(online.id.mean() > online.ood.mean(), f"online mixture {online!r}")

    mask = ol.sample_mask([0.0, 1.0] * 50, 7)
    check(mask == [False, True] * 50, "masks at p=0 and p=1")

    cfg = ol.Config(K=200, K_p=50, eval_every=100, samples_per_class=40, test_per_class=20)
    check(cfg.get("K") == "200", "config override")
    with tempfile.TemporaryDirectory() as tmp:
        summary = ol.train(cfg, tmp)
        check(summary["steps"] == 200 and 0.0 <= summary["accuracy"] <= 1.0, "short training run")
        ol.generate_dataset(cfg, f"{tmp}/data.txt")
        reports = ol.evaluate(f"{tmp}/{cfg.run_name()}/checkpoint.txt", f"{tmp}/data.txt", ["subspace", "energy"])
        check(reports[0]["auroc"] == summary["auroc"]["subspace"], "checkpoint evaluation matches the run")

    try:
        ol.Config(pi=2.0)
    except ValueError:
        check(True, "invalid config raises ValueError")
    else:
        check(False, "invalid config raises ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
