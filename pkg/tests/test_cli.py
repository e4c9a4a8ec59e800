import csv
import json
import math

import numpy as np
import pytest
import yaml

from advflat.attacks import AttackConfig
from advflat.cli import main
from advflat.harness import DatasetSpec, make_synthetic_dataset
from advflat.models import MlpClassifier, load_model, save_model
from toy import TOY_CONFIG


def small_config(tmp_path, **attack):
    cfg = yaml.safe_load(TOY_CONFIG.read_text())
    cfg["dataset"]["n_per_class"] = 30
    cfg["train"]["epochs"] = 30
    cfg["attack"].update({"T": 4, "N": 4, **attack})
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    conf = small_config(root)
    assert main(["dataset-gen", "--config", str(conf), "--out", str(root / "ds.json")]) == 0
    assert main(["train", "--config", str(conf), "--dataset", str(root / "ds.json"), "--out", str(root / "models")]) == 0
    return root, conf


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_dataset_gen_default_and_repeatable(tmp_path, capsys):
    assert main(["dataset-gen", "--out", str(tmp_path / "a.json")]) == 0
    assert main(["dataset-gen", "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    out = capsys.readouterr().out
    assert "d=2 C=8" in out and "seed=0" in out
    assert main(["dataset-gen", "--seed", "5", "--out", str(tmp_path / "c.json")]) == 0
    assert (tmp_path / "c.json").read_bytes() != (tmp_path / "a.json").read_bytes()


def test_bad_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: 1\nattack:\n  epz: 0.1\n")
    assert main(["dataset-gen", "--config", str(bad), "--out", str(tmp_path / "x.json")]) == 2
    assert "unknown key: epz" in capsys.readouterr().err
    bad.write_text("version: 1\nflavour: 3\n")
    assert main(["dataset-gen", "--config", str(bad), "--out", str(tmp_path / "x.json")]) == 2
    assert "unknown key: flavour" in capsys.readouterr().err
    bad.write_text("version: 7\n")
    assert main(["dataset-gen", "--config", str(bad), "--out", str(tmp_path / "x.json")]) == 2


def test_train_toy_zoo(tmp_path, capsys):
    assert main(["dataset-gen", "--config", str(TOY_CONFIG), "--out", str(tmp_path / "ds.json")]) == 0
    assert main(["train", "--config", str(TOY_CONFIG), "--dataset", str(tmp_path / "ds.json"), "--out", str(tmp_path / "m")]) == 0
    assert sorted(p.name for p in (tmp_path / "m").glob("*.model")) == ["m0.model", "m1.model", "m2.model", "m3.model"]
    zoo = json.loads((tmp_path / "m" / "zoo.json").read_text())
    assert all(m["test_accuracy"] >= 0.9 for m in zoo["models"])
    lines = [l.split() for l in capsys.readouterr().out.splitlines() if l.startswith("m") and not l.startswith("model")]
    assert len(lines) == 4 and all(float(l[2]) >= 0.9 for l in lines)


def test_train_zero_epochs_and_determinism(world, tmp_path):
    root, conf = world
    ds = str(root / "ds.json")
    assert main(["train", "--config", str(conf), "--dataset", ds, "--out", str(tmp_path / "z"), "--epochs", "0"]) == 0
    m0 = load_model(tmp_path / "z" / "m0.model")
    assert m0.epochs_trained == 0
    trained = load_model(root / "models" / "m0.model")
    assert not np.array_equal(m0.weights[0], trained.weights[0])
    assert main(["train", "--config", str(conf), "--dataset", ds, "--out", str(tmp_path / "again")]) == 0
    for p in (root / "models").iterdir():
        assert p.read_bytes() == (tmp_path / "again" / p.name).read_bytes()


def test_train_unreadable_dataset(tmp_path, capsys):
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["train", "--dataset", str(tmp_path / "junk.json"), "--out", str(tmp_path / "m")]) != 0
    assert main(["train", "--dataset", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m")]) != 0
    assert "cannot read dataset" in capsys.readouterr().err


def attack_cmd(root, conf, out, *extra):
    return ["attack", "--config", str(conf), "--dataset", str(root / "ds.json"), "--models", str(root / "models"),
            "--out", str(out), *extra]


def test_attack_outputs(world, tmp_path):
    root, conf = world
    assert main(attack_cmd(root, conf, tmp_path / "run", "--algo", "afa", "--surrogate", "m0")) == 0
    rows = read_csv(tmp_path / "run" / "adversarial.csv")
    assert rows[0] == ["index", "label", "x0", "x1"] and len(rows) == 1 + 48
    traces = sorted((tmp_path / "run" / "traces").glob("example_*.csv"))
    assert len(traces) == 48
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["algo"] == "afa" and manifest["surrogate"] == "m0"
    assert manifest["attack"]["N"] == 4 and manifest["rng_version"]


def test_attack_reduction_flags_match_mi(world, tmp_path):
    root, conf = world
    red = ["--algo", "afa", "--lambda-f", "0", "--no-neighbor-ascent", "--no-mcas", "--n", "1", "--xi", "0"]
    assert main(attack_cmd(root, conf, tmp_path / "afa", "--surrogate", "m1", *red)) == 0
    assert main(attack_cmd(root, conf, tmp_path / "mi", "--surrogate", "m1", "--algo", "mi")) == 0
    assert (tmp_path / "afa" / "adversarial.csv").read_bytes() == (tmp_path / "mi" / "adversarial.csv").read_bytes()


def test_attack_eps_recorded(world, tmp_path):
    root, conf = world
    assert main(attack_cmd(root, conf, tmp_path / "run", "--surrogate", "m3", "--algo", "fgsm", "--eps", "0.0627")) == 0
    eps = json.loads((tmp_path / "run" / "manifest.json").read_text())["attack"]["eps"]
    assert eps == 0.0627
    assert eps == pytest.approx(16 / 255, abs=1e-4)


def test_attack_unknown_surrogate(world, tmp_path, capsys):
    root, conf = world
    assert main(attack_cmd(root, conf, tmp_path / "run", "--surrogate", "m9")) == 2
    err = capsys.readouterr().err
    assert "m9" in err and "m0, m1, m2, m3" in err


def test_eval_single_target_all_fooled(tmp_path, capsys):
    ds = make_synthetic_dataset(DatasetSpec(C=2, n_per_class=10))
    ds.save(tmp_path / "ds.json")
    target = MlpClassifier([np.array([[1.0, 0.0], [0.0, 1.0]])], [np.zeros(2)], model_id="t", epochs_trained=1)
    (tmp_path / "models").mkdir()
    save_model(target, tmp_path / "models" / "t.model")
    run = tmp_path / "run"
    run.mkdir()
    labels = ds.test_y
    x_adv = np.where(labels[:, None] == 0, [[0.1, 0.9]], [[0.9, 0.1]])  # always the other class
    with open(run / "adversarial.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "x0", "x1"])
        for i, y, row in zip(ds.test_idx, labels, x_adv):
            w.writerow([i, y, *row])
    (run / "manifest.json").write_text(json.dumps({"algo": "mi", "surrogate": "s", "attack": AttackConfig().to_dict(), "seed": 0}))
    assert main(["eval", "--dataset", str(tmp_path / "ds.json"), "--models", str(tmp_path / "models"),
                 "--runs", str(run), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "1.000" in out
    manifest = json.loads((tmp_path / "rep" / "mi" / "manifest.json").read_text())
    assert manifest["rank_agreement"] is None and manifest["rank_agreement_degenerate"]


def test_eval_comparison_and_determinism(world, tmp_path, capsys):
    root, conf = world
    runs = []
    for algo in ("afa", "mi"):
        for sid in ("m0", "m1", "m2"):
            run = tmp_path / f"{algo}_{sid}"
            assert main(attack_cmd(root, conf, run, "--surrogate", sid, "--algo", algo)) == 0
            runs.append(str(run))
    for out in ("rep1", "rep2"):
        assert main(["eval", "--dataset", str(root / "ds.json"), "--models", str(root / "models"),
                     "--runs", *runs, "--out", str(tmp_path / out)]) == 0
    comp = read_csv(tmp_path / "rep1" / "comparison.csv")
    assert comp[0][0] == "algo" and [r[0] for r in comp[1:]] == ["afa", "mi"]
    asr = read_csv(tmp_path / "rep1" / "afa" / "asr.csv")
    assert asr[0] == ["surrogate\\target", "m0", "m1", "m2", "m3"] and len(asr) == 4
    for p in (tmp_path / "rep1").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "rep2" / p.relative_to(tmp_path / "rep1")).read_bytes()
    assert "[mi] ASR" in capsys.readouterr().out


def test_eval_dimension_mismatch(world, tmp_path, capsys):
    root, conf = world
    assert main(attack_cmd(root, conf, tmp_path / "run", "--surrogate", "m0", "--algo", "fgsm")) == 0
    (tmp_path / "m3d").mkdir()
    save_model(MlpClassifier.initialize([3, 8], model_id="wide"), tmp_path / "m3d" / "wide.model")
    code = main(["eval", "--dataset", str(root / "ds.json"), "--models", str(tmp_path / "m3d"),
                 "--runs", str(tmp_path / "run"), "--out", str(tmp_path / "rep")])
    assert code == 1
    err = capsys.readouterr().err
    assert "d=2" in err and "d=3" in err


def analyze(root, conf, kind, out, model="m0", *extra):
    return ["analyze", kind, "--config", str(conf), "--dataset", str(root / "ds.json"),
            "--model", str(root / "models" / f"{model}.model"), "--out", str(out), *extra]


def test_analyze_surface(world, tmp_path):
    root, conf = world
    assert main(analyze(root, conf, "surface", tmp_path / "s.csv", "m1", "--resolution", "21", "--index", "3")) == 0
    from advflat.flatness import read_surface_csv
    from advflat.harness import Dataset

    header, grid = read_surface_csv(tmp_path / "s.csv")
    assert grid.shape == (21, 21)
    ds = Dataset.load(root / "ds.json")
    model = load_model(root / "models" / "m1.model")
    assert grid[10, 10] == model.loss(ds.test_x[3], int(ds.test_y[3]))
    assert (tmp_path / "s.json").exists()


def test_analyze_flatness(world, tmp_path):
    root, conf = world
    assert main(analyze(root, conf, "flatness", tmp_path / "f.json", "m0", "--n", "200")) == 0
    est = json.loads((tmp_path / "f.json").read_text())
    assert est["psi0"] >= 0 and est["psi1"] >= 0
    assert est["psi_af"] == pytest.approx(0.5 * est["psi0"] + 0.5 * est["psi1"])


def test_analyze_vicinity(world, tmp_path, capsys):
    root, conf = world
    for model in ("m0", "m1", "m3"):
        assert main(analyze(root, conf, "vicinity", tmp_path / "v.json", model)) == 0
        assert "violations=0 " in capsys.readouterr().out


def test_analyze_vicinity_refuses_high_dimension(tmp_path, capsys):
    ds = make_synthetic_dataset(DatasetSpec(d=4, C=2, n_per_class=5))
    ds.save(tmp_path / "ds.json")
    save_model(MlpClassifier.initialize([4, 2], model_id="m"), tmp_path / "m.model")
    code = main(["analyze", "vicinity", "--dataset", str(tmp_path / "ds.json"), "--model", str(tmp_path / "m.model"),
                 "--out", str(tmp_path / "v.json")])
    assert code == 2
    assert "d <= 3" in capsys.readouterr().err


def test_analyze_diversity(world, tmp_path):
    root, conf = world
    assert main(analyze(root, conf, "diversity", tmp_path / "d.csv", "m0", "--n-examples", "20")) == 0
    rows = read_csv(tmp_path / "d.csv")
    assert rows[0] == ["t", "uniform", "mcas"] and len(rows) == 1 + 4
    assert all(not math.isnan(float(v)) for r in rows[1:] for v in r[1:])


def test_help_documents_attack_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    flags = {
        "eps": "--eps", "T": "--T", "alpha": "--alpha", "eta": "--eta", "N": "--n", "xi": "--xi",
        "gamma_mcas": "--gamma-mcas", "eta_mcas": "--eta-mcas", "beta_f": "--beta-f", "lambda_f": "--lambda-f",
        "scheme": "--scheme", "neighbor_ascent": "--no-neighbor-ascent", "mcas_enabled": "--no-mcas",
        "mcas_reset_per_iteration": "--no-mcas-reset", "lo": "--lo", "hi": "--hi", "seed": "--seed",
    }
    assert set(flags) == set(AttackConfig.__dataclass_fields__)
    for flag in flags.values():
        assert flag in text


def test_unknown_flag_fails(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--epz", "0.1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
