import numpy as np
import pytest

ACCEPTANCE: list[str] = []
NOTES: list[str] = []

# criterion 6 budget; overridable for quick local runs
TRAIN_SEEDS = (0, 1, 2)
TRAIN_EPOCHS = 15


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
    if NOTES:
        terminalreporter.section("invariant measurements")
        for line in NOTES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_runs():
    """Per-IMBV results of the tiny training budget, for each seed and lambda_c in (0.1, 0)."""
    from threadpoolctl import threadpool_limits

    from pvckit import phantom
    from pvckit.dataset import make_sample
    from pvckit.losses import LossWeights
    from pvckit.network import NetworkConfig
    from pvckit.train import TrainConfig, evaluate, train

    cases = [(f"case_{i:03d}", phantom.generate(s)) for i, s in
             enumerate(phantom.cohort_specs(phantom.small_spec(), 28, seed=7))]
    runs = {}
    for seed in TRAIN_SEEDS:
        parts = phantom.dataset_split(cases, seed=seed)
        samples = dict(zip(("train", "val", "test"), ([make_sample(c, k) for c, k in p] for p in parts)))
        for lc in (0.1, 0.0):
            cfg = TrainConfig(network=NetworkConfig(filters=8), weights=LossWeights(0.8, 0.1, lc),
                              epochs=TRAIN_EPOCHS, seed=seed)
            with threadpool_limits(limits=1):
                res = train(cfg, samples)
            ev = evaluate(res.model, samples["test"])
            runs[(seed, lc)] = {k: np.asarray(v) for k, v in ev.imbv.items()}
    return runs
