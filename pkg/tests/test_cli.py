import json

import numpy as np
import pytest

from planted import planted_model, sample_corpus
from rhomp import cli
from rhomp.corpus import StateSpace, count_transitions, parse_trails, write_trails
from rhomp.evaluation import FamilyFit
from rhomp.model import FitTrace, log_likelihood
from rhomp.modelio import dumps_model, load_model, read_states, write_states


def write_corpus(path, corpus, space=None):
    with open(path, "w") as f:
        write_trails(f, corpus, space)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    model = planted_model(8, [0.7, 0.3], k=3, seed=0)
    corpus = sample_corpus(model, 120, 25, seed=0)
    space = StateSpace(tuple(f"s{i}" for i in range(8)))
    path = d / "trails.txt"
    write_corpus(path, corpus, space)
    return d, path


def run(*argv):
    return cli.main([str(a) for a in argv])


def load(path):
    with open(path) as f:
        return load_model(f)


def test_train_rhomp_auto_alpha(toy, tmp_path, capsys):
    _, trails = toy
    out = tmp_path / "m.rhomp"
    assert run("train", "--input", trails, "--model", out, "--order", 2, "--min-count", 0,
               "--nodes", 5) == 0
    summary = json.loads(capsys.readouterr().out)
    assert 0 < summary["alpha"] < 1
    assert out.read_text().startswith("rhomp\torder=2\tN=")
    trace = (tmp_path / "m.rhomp.trace.tsv").read_text().splitlines()
    assert trace[0].startswith("attempt\tstep\tobjective")
    assert len(read_states(open(tmp_path / "m.rhomp.states")).tokens) == load(out).n_states


def test_train_is_deterministic_and_files_round_trip(toy, tmp_path):
    _, trails = toy
    a, b = tmp_path / "a", tmp_path / "b"
    for p in (a, b):
        assert run("train", "--input", trails, "--model", p, "--alpha", 0.7, "--min-count", 0) == 0
    assert a.read_bytes() == b.read_bytes()
    assert dumps_model(load(a)) == a.read_text()


def test_train_mc_matches_count_ratios(tmp_path):
    trails = tmp_path / "t.txt"
    trails.write_text("a b a c\na b\n")
    out = tmp_path / "mc"
    assert run("train", "--input", trails, "--model", out, "--family", "mc", "--order", 1,
               "--min-count", 0) == 0
    model = load(out)
    space = read_states(open(str(out) + ".states"))
    a, b, c = (space.encode(t) for t in "abc")
    states, probs = model.predict([a])
    got = dict(zip(states.tolist(), probs.tolist()))
    assert got == {b: 2 / 3, c: 1 / 3}


def test_unreadable_input(tmp_path, capsys):
    assert run("train", "--input", tmp_path / "missing.txt", "--model", tmp_path / "m") == 2
    assert "stage 'parse'" in capsys.readouterr().err


def test_train_requires_output_path(toy, capsys):
    _, path = toy
    assert run("train", "--input", path) == 1
    assert "stage 'config'" in capsys.readouterr().err


def test_train_accepts_output_flag(toy, tmp_path):
    _, path = toy
    out = tmp_path / "m.txt"
    assert run("train", "--input", path, "--output", out, "--alpha", 0.7, "--min-count", 0) == 0
    assert load(out).order == 2


def test_malformed_input(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\na,,b\n")
    assert run("train", "--input", bad, "--format", "csv", "--model", tmp_path / "m") == 1
    err = capsys.readouterr().err
    assert "stage 'parse'" in err and "line 2" in err


def test_everything_pruned(tmp_path, capsys):
    p = tmp_path / "t.txt"
    p.write_text("a b\n")
    assert run("train", "--input", p, "--model", tmp_path / "m") == 1
    assert "stage 'preprocess'" in capsys.readouterr().err


def test_stall_exit_code(toy, tmp_path, monkeypatch, capsys):
    _, trails = toy

    def stalled(*args, **kwargs):
        return FamilyFit(None, traces={2: FitTrace([1.0], stalled=True)})

    monkeypatch.setattr(cli, "train_family", stalled)
    assert run("train", "--input", trails, "--model", tmp_path / "m", "--min-count", 0) == 3
    assert "stage 'fit'" in capsys.readouterr().err


def test_bad_config_values(toy, tmp_path, capsys):
    _, trails = toy
    assert run("train", "--input", trails, "--model", tmp_path / "m", "--split", 1.5) == 1
    assert "stage 'config'" in capsys.readouterr().err


def test_config_precedence(toy, tmp_path, monkeypatch):
    _, trails = toy
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"order": 1, "family": "mc", "min-count": 0, "threads": 2}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--input", str(trails)])
    monkeypatch.setenv(cli.THREADS_ENV, "4")
    resolved = cli.resolve_config(args)
    assert (resolved["order"], resolved["family"], resolved["min_count"]) == (1, "mc", 0)
    assert resolved["threads"] == 2
    assert resolved["tol"] == 1e-5 and resolved["nodes"] == 15 and resolved["split"] == 0.6
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--order", "3",
                                          "--threads", "1"])
    resolved = cli.resolve_config(args)
    assert resolved["order"] == 3 and resolved["threads"] == 1


def test_threads_env_only_without_flag(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    parse = cli.build_parser().parse_args
    assert cli.resolve_config(parse(["train"]))["threads"] == 3
    assert cli.resolve_config(parse(["train", "--threads", "2"]))["threads"] == 2


def test_evaluate_repetitions(toy, tmp_path):
    _, trails = toy
    out = tmp_path / "report.json"
    assert run("evaluate", "--input", trails, "--train-cascade", "--family", "kneser",
               "--order", 2, "--repetitions", 5, "--min-count", 0, "--output", out,
               "--buckets", tmp_path / "b.csv") == 0
    doc = json.loads(out.read_text())
    assert len(doc["trials"]) == 5
    assert [r["k"] for r in doc["summary"]] == [1, 2, 3, 4, 5]
    for row in doc["summary"]:
        trial_vals = [t["records"][row["k"] - 1]["precision"] for t in doc["trials"]]
        assert row["precision"] == pytest.approx(np.mean(trial_vals))
        assert row["precision_sd"] == pytest.approx(np.std(trial_vals, ddof=1))
    assert (tmp_path / "b.csv").read_text().startswith("bucket_index,median_train_count,precision")


def test_evaluate_perfect_model(tmp_path):
    trails = tmp_path / "cycle.txt"
    trails.write_text("a b c a b c a\nb c a b\n" * 3)
    m1 = tmp_path / "mc1"
    assert run("train", "--input", trails, "--model", m1, "--family", "mc", "--order", 1,
               "--min-count", 0) == 0
    out = tmp_path / "r.json"
    assert run("evaluate", "--input", trails, "--model", m1, "--output", out) == 0
    recs = json.loads(out.read_text())["trials"][0]["records"]
    assert [r["precision"] for r in recs] == [1.0] * 5
    assert recs[0]["mrr"] == 1.0


def test_evaluate_missing_cascade_member(toy, tmp_path, capsys):
    _, trails = toy
    m2 = tmp_path / "mc2"
    assert run("train", "--input", trails, "--model", m2, "--family", "mc", "--order", 2,
               "--min-count", 0) == 0
    assert run("evaluate", "--input", trails, "--model", m2) == 1
    assert "missing cascade member" in capsys.readouterr().err


def test_evaluate_with_cascade_files(toy, tmp_path):
    _, trails = toy
    paths = []
    for r in (1, 2):
        p = tmp_path / f"kn{r}"
        assert run("train", "--input", trails, "--model", p, "--family", "kneser", "--order", r,
                   "--min-count", 0) == 0
        paths.append(str(p))
    out = tmp_path / "r.json"
    assert run("evaluate", "--input", trails, "--model", ",".join(paths), "--output", out,
               "--ks", "1,3") == 0
    recs = json.loads(out.read_text())["trials"][0]["records"]
    assert [(r["family"], r["order"], r["k"]) for r in recs] == [("kneser", 2, 1), ("kneser", 2, 3)]


@pytest.fixture(scope="module")
def planted_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    model = planted_model(50, [0.75, 0.25], k=5, seed=11)
    path = d / "planted.rhomp"
    path.write_text(dumps_model(model))
    with open(str(path) + ".states", "w") as f:
        write_states(f, StateSpace(tuple(f"q{i}" for i in range(50))))
    return model, path


def test_sample_round_trip(planted_file, tmp_path):
    _, path = planted_file
    out = tmp_path / "s.txt"
    assert run("sample", "--model", path, "--n-trails", 5, "--length", 30, "--seed", 1,
               "--output", out) == 0
    space = read_states(open(str(path) + ".states"))
    _, corpus = parse_trails(out.read_text(), space=space)
    assert len(corpus) == 5 and all(len(t) == 30 for t in corpus)
    buf = tmp_path / "again.txt"
    write_corpus(buf, corpus, space)
    assert buf.read_text() == out.read_text()
    other = tmp_path / "s2.txt"
    assert run("sample", "--model", path, "--n-trails", 5, "--length", 30, "--seed", 2,
               "--output", other) == 0
    assert other.read_text() != out.read_text()
    same = tmp_path / "s3.txt"
    run("sample", "--model", path, "--n-trails", 5, "--length", 30, "--seed", 1, "--output", same)
    assert same.read_text() == out.read_text()


@pytest.mark.slow
def test_sample_refit_recovers_likelihood(planted_file, tmp_path):
    planted, path = planted_file
    train, test = tmp_path / "train.txt", tmp_path / "test.txt"
    assert run("sample", "--model", path, "--n-trails", 1000, "--length", 101, "--seed", 1,
               "--output", train) == 0
    assert run("sample", "--model", path, "--n-trails", 500, "--length", 101, "--seed", 2,
               "--output", test) == 0
    fitted_path = tmp_path / "fit.rhomp"
    assert run("train", "--input", train, "--model", fitted_path, "--alpha", 0.75,
               "--min-count", 0, "--keep-self-loops") == 0
    fitted = load(fitted_path)
    fitted_space = read_states(open(str(fitted_path) + ".states"))
    planted_space = read_states(open(str(path) + ".states"))

    def heldout(model, space):
        _, corpus = parse_trails(test.read_text(), space=space)
        counts = count_transitions(corpus, 2)
        return log_likelihood(model, counts) / int(counts.table(2)[1].sum())

    ll_fit = heldout(fitted, fitted_space)
    ll_true = heldout(planted, planted_space)
    assert abs(ll_fit - ll_true) / abs(ll_true) < 0.01


def test_sample_rejects_count_models(toy, tmp_path, capsys):
    _, trails = toy
    m = tmp_path / "mc"
    run("train", "--input", trails, "--model", m, "--family", "mc", "--order", 1, "--min-count", 0)
    assert run("sample", "--model", m) == 1


def test_sweep_cardinality(toy, tmp_path):
    _, trails = toy
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--input", trails, "--order", 3, "--min-count", 0, "--nodes", 5,
               "--output", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "family,order,k,precision,mrr"
    rows = [line.split(",") for line in lines[1:]]
    for k in "12345":
        assert len([r for r in rows if r[2] == k]) == 9


def test_sweep_first_order_matches_standalone(toy, tmp_path):
    _, trails = toy
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--input", trails, "--order", 1, "--min-count", 0, "--families", "mc",
               "--output", out) == 0
    sweep_rows = out.read_text().splitlines()[1:]
    rep = tmp_path / "r.json"
    assert run("evaluate", "--input", trails, "--train-cascade", "--family", "mc", "--order", 1,
               "--repetitions", 1, "--min-count", 0, "--output", rep) == 0
    recs = json.loads(rep.read_text())["trials"][0]["records"]
    for row, rec in zip(sweep_rows, recs):
        fam, order, k, prec, mrr = row.split(",")
        assert float(prec) == pytest.approx(rec["precision"], abs=1e-6)
        assert float(mrr) == pytest.approx(rec["mrr"], abs=1e-6)


def test_third_order_uses_derived_beta(toy, tmp_path, capsys):
    _, trails = toy
    out = tmp_path / "m3"
    assert run("train", "--input", trails, "--model", out, "--order", 3, "--min-count", 0,
               "--nodes", 5) == 0
    summary = json.loads(capsys.readouterr().out)
    alpha, beta = summary["alpha"], summary["beta"]
    assert beta == pytest.approx((1 - alpha) / alpha)
    w = load(out).weights
    assert w[1] / w[0] == pytest.approx(beta) and w[2] / w[1] == pytest.approx(beta)
