"""
Command-line round trips and the evaluation studies behind ``cotlab eval``.
"""

import numpy as np
import orjson
import pandas as pd
import pytest

from src import cot_flow, pcp_map, studies
from src.cli import main
from src.config import FlowConfig, PcpTrainConfig
from src.checkpoint import save_checkpoint
from src.datasets import Dataset, load_dataset, split_indices
from src.errors import NonFiniteError
from src.gaussian_bench import default_spec, gaussian_bench
from src.lotka_volterra import REFERENCE_RATES, build_lv_dataset
from src.metrics import SbcResult
from src.records import RunRecord
from src.reports import COLUMNS, read_table


def _write(path, data):
    path.write_bytes(orjson.dumps(data))
    return str(path)


@pytest.fixture
def gauss_csv(tmp_path):
    out = tmp_path / "gauss.csv"
    assert main(["gen-gauss", "--n", "120", "--out", str(out), "--seed", "3", "--log-level", "WARNING"]) == 0
    return str(out)


# --- cli ----------------------------------------------------------------------------

def test_schema_command_writes_every_schema(tmp_path):
    assert main(["schema", "--out-dir", str(tmp_path), "--log-level", "WARNING"]) == 0
    for name in ("experiment", "pcp_train", "flow", "sample"):
        schema = orjson.loads((tmp_path / f"{name}.schema.json").read_bytes())
        assert "properties" in schema


def test_gen_gauss_writes_a_loadable_dataset(gauss_csv):
    ds = load_dataset(gauss_csv)
    assert (ds.n, ds.m) == (2, 1)
    assert len(ds.X) == 120
    assert ds.meta["source"] == "gaussian"


def test_pcp_train_sample_eval_report(tmp_path, gauss_csv):
    out = str(tmp_path / "out")
    config = _write(tmp_path / "pcp.json", {"width": 6, "depth": 2, "epochs": 1, "batch_size": 32})
    common = ["--out-dir", out, "--log-level", "WARNING", "--seed", "1"]
    assert main(["train", "--model", "pcp", "--dataset", gauss_csv, "--config", config,
                 "--run-id", "cli", "--evaluate", *common]) == 0
    checkpoint = tmp_path / "out" / "checkpoints" / "cli.json"
    assert checkpoint.exists()
    record = RunRecord.load(tmp_path / "out" / "runs" / "cli.json")
    assert record.checkpoint == str(checkpoint)
    assert record.metrics["test_nll"] is not None

    samples = tmp_path / "samples.csv"
    assert main(["sample", "--checkpoint", str(checkpoint), "--dataset", gauss_csv, "--row", "0",
                 "--n", "5", "--out", str(samples), *common]) == 0
    frame = pd.read_csv(samples)
    assert frame.shape == (5, 3)
    assert frame.iloc[:, 2].nunique() == 1

    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", gauss_csv, *common]) == 0
    metrics = orjson.loads((tmp_path / "out" / "eval.json").read_bytes())
    assert [m["metric"] for m in metrics] == ["test_nll", "mmd"]

    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", gauss_csv, "--study", "efficiency",
                 "--n", "10", *common]) == 0
    efficiency = read_table(tmp_path / "out" / "efficiency.csv")
    assert list(efficiency["setting"].unique()) == ["tol"]
    assert efficiency["relative_error"].iloc[0] == 0.0

    # the step-count study only applies to flows
    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", gauss_csv, "--study", "nt", *common]) == 2

    assert main(["report", *common]) == 0
    results = read_table(tmp_path / "out" / "results.csv")
    assert list(results.columns) == COLUMNS["results"]
    assert set(results["statistic"]) == {"best", "median", "worst"}


def test_cot_train_and_step_study(tmp_path, gauss_csv):
    out = str(tmp_path / "out")
    config = _write(tmp_path / "cot.json", {"width": 4, "nt": 2, "epochs": 1, "batch_size": 64})
    common = ["--out-dir", out, "--log-level", "WARNING"]
    assert main(["train", "--model", "cot", "--dataset", gauss_csv, "--config", config,
                 "--run-id", "flow", *common]) == 0
    checkpoint = str(tmp_path / "out" / "checkpoints" / "flow.json")
    assert main(["eval", "--checkpoint", checkpoint, "--dataset", gauss_csv, "--study", "nt", *common]) == 0
    table = read_table(tmp_path / "out" / "nt_errors.csv")
    assert table["nt"].tolist() == list(studies.NT_LIST)
    assert (table["nt_ref"] == studies.NT_REFERENCE).all()
    # resuming as the other model family is refused
    assert main(["train", "--model", "pcp", "--dataset", gauss_csv, "--resume", checkpoint, *common]) == 2


def test_cli_error_exit_codes(tmp_path, gauss_csv):
    common = ["--out-dir", str(tmp_path), "--log-level", "ERROR"]
    assert main(["train", "--model", "pcp", "--dataset", str(tmp_path / "missing.csv"), *common]) == 2
    assert main(["search", *common]) == 2
    bad = _write(tmp_path / "bad.json", {"width": -1})
    assert main(["train", "--model", "pcp", "--dataset", gauss_csv, "--config", bad, *common]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--dataset", gauss_csv, *common]) == 2


def test_diverged_training_exits_with_the_numerical_code(tmp_path, gauss_csv, monkeypatch):
    def exploding(models, x, y):
        raise NonFiniteError("loss", 0)

    monkeypatch.setattr(pcp_map, "_training_loss", exploding)
    config = _write(tmp_path / "pcp.json", {"width": 4, "depth": 2, "epochs": 1})
    assert main(["train", "--model", "pcp", "--dataset", gauss_csv, "--config", config, "--run-id", "blowup",
                 "--out-dir", str(tmp_path), "--log-level", "ERROR"]) == 3
    record = RunRecord.load(tmp_path / "runs" / "blowup.json")
    assert record.status == "diverged"
    assert (tmp_path / "checkpoints" / "blowup.json").exists()


def test_malformed_rates_are_a_config_error(tmp_path, gauss_csv):
    checkpoint = save_checkpoint(pcp_map.init_model(PcpTrainConfig(width=4, depth=2), n=2, m=1),
                                 tmp_path / "pcp.json")
    assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", gauss_csv, "--study", "lv",
                 "--rates", "0.01,fast", "--out-dir", str(tmp_path), "--log-level", "ERROR"]) == 2


def test_search_command_runs_both_stages(tmp_path, gauss_csv, monkeypatch):
    monkeypatch.delenv("COTLAB_SEARCH_PRESET", raising=False)
    config = _write(tmp_path / "experiment.json", {
        "dataset": gauss_csv, "model": "cot", "preset": "desk", "pilot_tuples": 2, "pilot_epochs": 1,
        "top_k": 1, "repeats": 1, "full_epochs": 1, "mmd_samples": 10,
    })
    out = tmp_path / "search"
    assert main(["search", "--config", config, "--out-dir", str(out), "--workers", "1",
                 "--log-level", "WARNING"]) == 0
    ranking = orjson.loads((out / "pilot_ranking.json").read_bytes())
    assert [r["rank"] for r in ranking] == [0, 1]
    assert (out / "results.csv").exists() and (out / "loss_curves.csv").exists()


# --- studies ------------------------------------------------------------------------

def test_histogram_counts_cover_the_finite_samples(rng):
    samples = rng.standard_normal((200, 2))
    samples[:5, 1] = np.nan
    frame = studies.histogram_frame(samples, bins=7, names=["a", "b"])
    counts = frame.groupby("component")["count"].sum()
    assert counts["a"] == 200 and counts["b"] == 195
    assert (frame["bin_left"] < frame["bin_right"]).all()
    assert studies.histogram_frame(np.full((3, 1), np.inf)).empty


def test_sbc_frame_lists_every_rank():
    result = SbcResult(ranks=np.array([[0, 1], [2, 1], [1, 1]]), L=2)
    frame = studies.sbc_frame(result)
    assert len(frame) == 2 * 3
    np.testing.assert_allclose(frame[frame["dim"] == 1]["ecdf"], [0.0, 1.0, 1.0])
    np.testing.assert_allclose(frame["uniform"].iloc[-1], 1.0)


def test_flow_efficiency_uses_the_finest_step_count_as_reference(rng):
    dataset, _ = gaussian_bench(default_spec(), 60, seed=0)
    model = cot_flow.init_model(FlowConfig(width=4), n=2, m=1)
    frame = studies.efficiency_study(model, dataset.test[1][0], N=8, repeats=1, nts=(2, 8, 4))
    assert frame["value"].tolist() == [8, 4, 2]
    assert frame["relative_error"].iloc[0] == 0.0
    assert (frame["non_converged"] == 0).all()


def test_resampled_pairs_come_from_the_evaluation_split(rng):
    X, Y = rng.standard_normal((30, 2)), rng.standard_normal((30, 1))
    dataset = Dataset.build(X, Y, split_indices(30, seed=0))
    Xs, Ys = studies.pair_sampler(dataset)(50, np.random.default_rng(0))
    X_eval, Y_eval = dataset.test
    assert Xs.shape == (50, 2)
    rows = {tuple(r) for r in np.hstack([X_eval, Y_eval])}
    assert all(tuple(r) in rows for r in np.hstack([Xs, Ys]))


def test_sbc_study_on_an_untrained_model():
    dataset, _ = gaussian_bench(default_spec(), 60, seed=1)
    model = pcp_map.init_model(PcpTrainConfig(width=4, depth=2), n=2, m=1)
    result = studies.sbc_study(model, dataset, M=6, L=4, seed=2)
    assert result.ranks.shape == (6, 2)
    assert result.ranks.min() >= 0 and result.ranks.max() <= 4


@pytest.mark.slow
def test_lotka_volterra_posterior_is_in_rate_space():
    dataset = build_lv_dataset(200, seed=0)
    model = pcp_map.init_model(PcpTrainConfig(width=8, depth=2), n=4, m=9)
    posterior = studies.lv_posterior(model, dataset, N=20, seed=1)
    assert posterior.rates.shape == (20, 4)
    assert posterior.map_rates.shape == (4,)
    np.testing.assert_array_equal(posterior.true_rates, REFERENCE_RATES)
    assert posterior.log10_medians().shape == (4,)
