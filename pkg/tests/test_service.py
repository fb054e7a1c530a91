import json

import pytest
from fastapi.testclient import TestClient

from amortex.service.app import app

client = TestClient(app)

TRUE_PARAMS = {"gamma0": 1.0, "gamma1": 0.5, "gamma2": 0.5,
               "phi": 0.5, "sigma": 1.0, "beta3": 5.0, "rho": 0.5}
TINY_TRAIN = {"batch_size": 16, "sims_budget": 128, "heldout_size": 16, "eval_every": 8,
              "n_lstm": 8, "n_dense": 8, "flow_hidden": 16, "flow_blocks": 2}


class TestInfraEndpoints:
    def test_health(self):
        body = client.get("/health").json()
        assert body["status"] == "ok"

    def test_catalog(self):
        body = client.get("/catalog").json()
        assert set(body["variants"]) == {f"D{i}" for i in range(1, 9)} | {"DY"}
        assert body["covariate_models"]["M5"] == [[0, False], [1, False], [2, False],
                                                  [0, True]]
        assert "smoke" in body["presets"]
        assert body["scenarios"]["2"] == [1024, 128]


class TestSimulateEndpoint:
    def test_simulate_inline(self):
        reply = client.post("/simulate", json={
            "variant": "D4", "covmodel": "M3", "seed": 1, "n": 15, "d1": 2, "d2": 2,
            "true_params": TRUE_PARAMS})
        assert reply.status_code == 200
        body = reply.json()
        assert body["rows"] == 15
        assert len(body["sites"]) == 4
        assert len(body["preview"]) == 5

    def test_censoring_applied(self):
        reply = client.post("/simulate", json={
            "variant": "D4", "covmodel": "M3", "seed": 1, "n": 16, "d1": 2, "d2": 2,
            "true_params": TRUE_PARAMS, "censor_level": 0.75})
        body = reply.json()
        assert body["thresholds"] is not None
        floor = min(min(row) for row in body["preview"])
        assert floor >= min(body["thresholds"])

    def test_config_error_maps_to_400_code_2(self):
        reply = client.post("/simulate", json={"variant": "D0", "true_params": {}})
        assert reply.status_code == 400
        assert reply.json()["code"] == 2

    def test_validation_rejects_unknown_field(self):
        reply = client.post("/simulate", json={"true_params": {}, "bogus": 1})
        assert reply.status_code == 422


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc_ckpt")
    reply = client.post("/train", json={
        "variant": "D4", "covmodel": "M1", "seed": 4, "n": 25,
        "grid": {"d1": 2, "d2": 2, "extra_covariates": 1},
        "train": TINY_TRAIN, "out_dir": str(out)})
    assert reply.status_code == 200, reply.text
    return reply.json()


@pytest.fixture(scope="module")
def sim_panel(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc_panel")
    reply = client.post("/simulate", json={
        "variant": "D4", "covmodel": "M1", "seed": 4, "n": 25, "d1": 2, "d2": 2,
        "true_params": {"gamma0": 1.0, "phi": 0.5, "sigma": 1.0, "beta3": 5.0,
                         "rho": 0.5},
        "out_dir": str(out)})
    assert reply.status_code == 200
    return reply.json()


class TestTrainGibbsDiagnose:
    def test_train_reports_checkpoints(self, trained):
        assert trained["ralpha_checkpoint"].endswith("ralpha.amx")
        assert trained["batches_run"]["ralpha"] == 8
        assert set(trained["checkpoint_hashes"]) == {"ralpha.amx", "rx.amx"}

    def test_gibbs_runs_on_panel(self, trained, sim_panel, tmp_path_factory):
        out = tmp_path_factory.mktemp("svc_chains")
        reply = client.post("/gibbs", json={
            "ralpha_checkpoint": trained["ralpha_checkpoint"],
            "rx_checkpoint": trained["rx_checkpoint"],
            "observations_file": sim_panel["panel_file"],
            "n_iter": 30, "chains": 2, "seed": 9, "out_dir": str(out)})
        assert reply.status_code == 200, reply.text
        body = reply.json()
        assert len(body["chain_files"]) == 2
        assert body["param_names"] == ["gamma0", "phi", "sigma", "beta3", "rho"]
        assert set(body["posterior_means"]) == set(body["param_names"])

    def test_diagnose_chain_metrics(self, trained, sim_panel, tmp_path_factory):
        out = tmp_path_factory.mktemp("svc_diag")
        chains_dir = tmp_path_factory.mktemp("svc_chains2")
        chain = client.post("/gibbs", json={
            "ralpha_checkpoint": trained["ralpha_checkpoint"],
            "rx_checkpoint": trained["rx_checkpoint"],
            "observations_file": sim_panel["panel_file"],
            "n_iter": 30, "chains": 1, "seed": 2, "out_dir": str(chains_dir)}).json()
        reply = client.post("/diagnose", json={
            "chain_files": chain["chain_files"], "burn_in": 5,
            "truth": {"phi": 0.5},
            "ralpha_checkpoint": trained["ralpha_checkpoint"],
            "observations_file": sim_panel["panel_file"],
            "posterior_draws": 4, "return_periods": [2], "out_dir": str(out)})
        assert reply.status_code == 200, reply.text
        body = reply.json()
        assert body["report"]["params"]["phi"]["truth"] == 0.5
        assert "mqae_train" in body["report"]["dataset"]
        assert any(f.endswith("metric_report.json") for f in body["files"])
        assert any(f.endswith("return_levels.csv") for f in body["files"])

    def test_gibbs_missing_checkpoint_is_config_error(self, sim_panel):
        reply = client.post("/gibbs", json={
            "ralpha_checkpoint": "/nope/a.amx", "rx_checkpoint": "/nope/b.amx",
            "observations_file": sim_panel["panel_file"], "out_dir": "/tmp/x"})
        assert reply.status_code in (400, 500)

    def test_diagnose_data_error_maps_to_code_4(self, trained, tmp_path):
        bogus = tmp_path / "obs.csv"
        bogus.write_text("date,wrong\n2020-09-01,1.0\n")
        chain = tmp_path / "chain.csv"
        chain.write_text("iteration,phi\n" + "\n".join(f"{i},{0.1 * (i % 7)}" for i in range(30)) + "\n")
        reply = client.post("/diagnose", json={
            "chain_files": [str(chain)],
            "ralpha_checkpoint": trained["ralpha_checkpoint"],
            "observations_file": str(bogus)})
        assert reply.status_code == 400
        assert reply.json()["code"] == 4


class TestExperimentAndCompare:
    def test_experiment_inline_config_and_compare(self, tmp_path_factory):
        base = tmp_path_factory.mktemp("svc_exp")
        config = {
            "variant": "D4", "covmodel": "M3", "seed": 11, "output_dir": str(base / "a"),
            "synthetic": {"d1": 2, "d2": 2, "n": 30, "extra_covariates": 1,
                          "true_params": TRUE_PARAMS},
            "train": TINY_TRAIN,
            "gibbs": {"n_iter": 30, "chains": 1},
            "metrics": {"posterior_draws": 4, "qq_band_reps": 5,
                        "return_periods": [2], "qq_sites": 1},
        }
        reply = client.post("/experiment", json={"config": config})
        assert reply.status_code == 200, reply.text
        body = reply.json()
        assert "mqae_train" in body["dataset_metrics"]
        assert "chain_00.csv" in body["artifacts"]

        config2 = dict(config)
        config2["seed"] = 12
        config2["output_dir"] = str(base / "b")
        assert client.post("/experiment", json={"config": config2}).status_code == 200

        reply = client.post("/compare", json={
            "result_dirs": [str(base / "a"), str(base / "b")], "criterion": "mqae",
            "split": "train"})
        assert reply.status_code == 200
        ranking = reply.json()["ranking"]
        assert ranking[0]["mqae"] <= ranking[1]["mqae"]

    def test_experiment_requires_exactly_one_source(self):
        reply = client.post("/experiment", json={})
        assert reply.status_code == 400
        assert reply.json()["code"] == 2
