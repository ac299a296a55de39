import json

import numpy as np
import pytest

from tcnlab.cli import main
from tcnlab.data import CohortConfig, build_samples, generate_cohort, label_sepsis_onset, load_cohort_csv, save_cohort_csv
from tcnlab.models import build_model, load_checkpoint
from tcnlab.pipeline import make_splits

SMALL = {"cohort": {"n_patients": 40}, "model": {"n_residual_blocks": 2, "n_filters": 4}, "train": {"epochs": 2}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("TCNLAB_SEED", raising=False)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


@pytest.fixture
def trained(workdir):
    assert main(["generate", "--config", "cfg.json", "--seed", "3", "--out", "c.csv"]) == 0
    assert main(["train", "--config", "cfg.json", "--seed", "3", "--cohort", "c.csv",
                 "--checkpoint", "m.json", "--out", "h.csv"]) == 0
    return workdir


class TestGenerate:
    def test_deterministic(self, workdir):
        for name in ("a.csv", "b.csv"):
            assert main(["generate", "--seed", "7", "--config", "cfg.json", "--out", name]) == 0
        assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()

    def test_septic_count(self, workdir):
        (workdir / "p.json").write_text(json.dumps({"cohort": {"n_patients": 100, "septic_fraction": 0.5}}))
        assert main(["generate", "--config", "p.json", "--out", "c.csv"]) == 0
        recs = load_cohort_csv(workdir / "c.csv")
        assert sum(label_sepsis_onset(r) is not None for r in recs) == 50

    def test_empty_cohort(self, workdir):
        (workdir / "z.json").write_text(json.dumps({"cohort": {"n_patients": 0}}))
        assert main(["generate", "--config", "z.json", "--out", "c.csv"]) == 0
        assert (workdir / "c.csv").read_text().count("\n") == 1

    def test_env_seed_fallback(self, workdir, monkeypatch):
        assert main(["generate", "--config", "cfg.json", "--seed", "11", "--out", "flag.csv"]) == 0
        monkeypatch.setenv("TCNLAB_SEED", "11")
        assert main(["generate", "--config", "cfg.json", "--out", "env.csv"]) == 0
        assert (workdir / "flag.csv").read_bytes() == (workdir / "env.csv").read_bytes()
        monkeypatch.setenv("TCNLAB_SEED", "12")
        assert main(["generate", "--config", "cfg.json", "--seed", "11", "--out", "both.csv"]) == 0
        assert (workdir / "both.csv").read_bytes() == (workdir / "flag.csv").read_bytes()

    def test_unwritable(self, workdir, capsys):
        assert main(["generate", "--config", "cfg.json", "--out", "missing/dir/c.csv"]) != 0
        assert "missing/dir/c.csv" in capsys.readouterr().err

    def test_bad_config(self, workdir):
        (workdir / "bad.json").write_text(json.dumps({"cohort": {"n_patient": 3}}))
        assert main(["generate", "--config", "bad.json", "--out", "c.csv"]) != 0


class TestTrain:
    def test_outputs(self, trained):
        ckpt = load_checkpoint(trained / "m.json")
        meta = ckpt.metadata
        assert meta["split_seed"] == 3 and meta["lookback"] == 13 and meta["baseline"] == "running_min"
        assert len(meta["standardization"]["mean"]) == 9
        rows = (trained / "h.csv").read_text().splitlines()
        assert rows[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert len(rows) == 3

    def test_flags_override_config(self, trained):
        assert main(["train", "--config", "cfg.json", "--seed", "3", "--cohort", "c.csv", "--model", "lstm",
                     "--epochs", "1", "--checkpoint", "l.json", "--out", "lh.csv"]) == 0
        assert load_checkpoint(trained / "l.json").spec.kind == "lstm"
        assert len((trained / "lh.csv").read_text().splitlines()) == 2

    def test_lr_zero_keeps_initialization(self, trained):
        assert main(["train", "--config", "cfg.json", "--seed", "3", "--cohort", "c.csv", "--epochs", "1",
                     "--lr", "0", "--checkpoint", "z.json"]) == 0
        ckpt = load_checkpoint(trained / "z.json")
        init = build_model(ckpt.spec, 3)
        for k, v in init.weights.items():
            np.testing.assert_array_equal(ckpt.params.weights[k], v)

    def test_test_patients_never_seen(self, trained):
        # rewriting every test patient's vitals must not change the trained checkpoint
        recs = load_cohort_csv(trained / "c.csv")
        test_ids = set(make_splits(recs, 13, seed=3).test.patient_ids)
        assert test_ids
        for r in recs:
            if r.patient_id in test_ids:
                r.features[:, 1:8] += 17.0
        save_cohort_csv(recs, trained / "c2.csv")
        assert main(["train", "--config", "cfg.json", "--seed", "3", "--cohort", "c2.csv",
                     "--checkpoint", "m2.json"]) == 0
        assert (trained / "m2.json").read_bytes() == (trained / "m.json").read_bytes()

    def test_bad_cohort(self, workdir, capsys):
        (workdir / "bad.csv").write_text("patient_id,hour\n")
        assert main(["train", "--cohort", "bad.csv", "--checkpoint", "m.json"]) == 1
        assert "missing columns" in capsys.readouterr().err

    def test_missing_required_flag(self, workdir):
        assert main(["train", "--cohort", "c.csv"]) == 1

    @pytest.mark.slow
    def test_default_config_200_patients(self, workdir):
        (workdir / "d.json").write_text(json.dumps({"cohort": {"n_patients": 200}}))
        assert main(["generate", "--config", "d.json", "--out", "c.csv"]) == 0
        assert main(["train", "--cohort", "c.csv", "--checkpoint", "m.json", "--out", "h.csv"]) == 0
        assert len((workdir / "h.csv").read_text().splitlines()) == 11


class TestEvaluate:
    def test_report(self, trained):
        assert main(["evaluate", "--checkpoint", "m.json", "--cohort", "c.csv", "--out", "r.csv"]) == 0
        lines = (trained / "r.csv").read_text().splitlines()
        assert len(lines) == 2
        cells = lines[1].split(",")
        assert cells[0] == "tcn" and len(cells) == 11
        assert 0.0 <= float(cells[5]) <= 1.0
        roc = (trained / "r_roc.csv").read_text().splitlines()
        assert roc[0] == "fpr,tpr" and roc[1] == "0.000000,0.000000" and roc[-1] == "1.000000,1.000000"

    def test_deterministic(self, trained):
        for name in ("a.csv", "b.csv"):
            assert main(["evaluate", "--checkpoint", "m.json", "--cohort", "c.csv", "--out", name]) == 0
        assert (trained / "a.csv").read_bytes() == (trained / "b.csv").read_bytes()
        assert (trained / "a_roc.csv").read_bytes() == (trained / "b_roc.csv").read_bytes()

    def test_tampered_checkpoint(self, trained, capsys):
        doc = json.loads((trained / "m.json").read_text())
        doc["parameters"][0]["shape"][0] += 1
        (trained / "t.json").write_text(json.dumps(doc))
        assert main(["evaluate", "--checkpoint", "t.json", "--cohort", "c.csv", "--out", "r.csv"]) == 1
        assert "shape" in capsys.readouterr().err
        assert not (trained / "r.csv").exists()

    def test_version_mismatch(self, trained, capsys):
        doc = json.loads((trained / "m.json").read_text())
        doc["version"] = 99
        (trained / "v.json").write_text(json.dumps(doc))
        assert main(["evaluate", "--checkpoint", "v.json", "--cohort", "c.csv", "--out", "r.csv"]) == 1
        assert "version" in capsys.readouterr().err


class TestPredict:
    def _septic_window(self, workdir):
        recs = generate_cohort(CohortConfig(n_patients=40, seed=3))
        s = next(s for s in build_samples(recs) if s.label == 1)
        np.savetxt(workdir / "w.csv", s.features, delimiter=",", fmt="%.17g")
        return s

    def test_probability(self, trained, capsys):
        self._septic_window(trained)
        outs = []
        for _ in range(2):
            assert main(["predict", "w.csv", "--checkpoint", "m.json"]) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
        p = float(outs[0])
        assert 0.0 <= p <= 1.0
        assert outs[0].strip() == f"{p:.6f}"

    def test_wrong_dimensions(self, trained, capsys):
        np.savetxt(trained / "short.csv", np.ones((9, 12)), delimiter=",")
        assert main(["predict", "short.csv", "--checkpoint", "m.json"]) == 1
        assert "(9, 13)" in capsys.readouterr().err
