import numpy as np
import pytest

from rkn.cli import main
from rkn.io import read_features
from rkn.model_io import load_model
from rkn.oracle import load_gram


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth(tmp_path, capsys):
    fa, lab = tmp_path / "s.fa", tmp_path / "s.lab"
    code, _, _ = run(capsys, "synth", "--fasta", fa, "--labels", lab, "--n", 40, "--length", 30, "--motif-length", 5)
    assert code == 0
    return fa, lab


def assert_one_line_error(err, kind):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith(f"error={kind} detail=")


def test_kernel_identical_sequences(tmp_path, capsys):
    fa = tmp_path / "a.fa"
    fa.write_text(">a\nACGT\n>b\nACGT\n")
    code, _, _ = run(capsys, "kernel", fa, "--out", tmp_path / "g.tsv", "--k", 2, "--normalize")
    assert code == 0
    np.testing.assert_allclose(load_gram(tmp_path / "g.tsv").values, np.ones((2, 2)))


def test_kernel_substring_example(tmp_path, capsys):
    fa = tmp_path / "a.fa"
    fa.write_text(">x\nAAB\n>y\nAB\n")
    code, _, _ = run(capsys, "kernel", fa, "--out", tmp_path / "g.tsv", "--kernel", "substring", "--k", 2,
                     "--lambda", 0.5, "--encoder", "onehot:AB")
    assert code == 0
    assert load_gram(tmp_path / "g.tsv").values[0, 1] == 1.5
    assert (tmp_path / "g.tsv.meta.json").exists()


def test_kernel_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.fa"
    code, _, err = run(capsys, "kernel", missing, "--out", tmp_path / "g.tsv")
    assert code == 2
    assert_one_line_error(err, "FileNotFound")
    assert str(missing) in err


def test_kernel_bad_sequence_named(tmp_path, capsys):
    fa = tmp_path / "a.fa"
    fa.write_text(">good\nACG\n>bad\nA\n")
    code, _, err = run(capsys, "kernel", fa, "--out", tmp_path / "g.tsv", "--k", 2)
    assert code == 2 and "'bad'" in err


def test_synth_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth", "--fasta", tmp_path / f"{name}.fa", "--labels", tmp_path / f"{name}.lab", "--n", 10)
    assert (tmp_path / "a.fa").read_bytes() == (tmp_path / "b.fa").read_bytes()
    assert (tmp_path / "a.lab").read_text().count("\t1\n") == 5


def test_train_unsupervised_then_embed(tmp_path, capsys, synth):
    fa, lab = synth
    model = tmp_path / "u.rkn"
    code, out, _ = run(capsys, "train", fa, lab, "--out", model, "--mode", "unsupervised", "--k", 3, "--q", 6)
    assert code == 0 and "mu=" in out
    code, _, _ = run(capsys, "embed", fa, model, "--out", tmp_path / "f.txt")
    assert code == 0
    ids, F = read_features(tmp_path / "f.txt")
    assert F.shape == (40, 6) and ids[0] == "seq00000"
    assert (tmp_path / "f.txt").read_text().startswith("dims 40 6\n")


def test_train_supervised_reproducible(tmp_path, capsys, synth):
    fa, lab = synth
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# small run\nepochs = 2\nk = 3\nq = 4\npooling = max\nlambda = 0.6\nseed = 5\n")
    hashes = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", fa, lab, "--config", cfg, "--out", tmp_path / f"{name}.rkn")
        assert code == 0
        hashes.append(out.split("sha256=")[1].split()[0])
        assert "val_loss=" in out
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a.rkn").read_bytes() == (tmp_path / "b.rkn").read_bytes()
    log = (tmp_path / "a.rkn.log").read_text().splitlines()
    assert len(log) == 3 and log[0].startswith("epoch=0 ")
    m = load_model(tmp_path / "a.rkn")
    assert m.pooling.kind == "max" and m.layers[0].lam == 0.6 and m.provenance["seed"] == 5


def test_train_flags_override_config(tmp_path, capsys, synth):
    fa, lab = synth
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 1\nk = 3\nq = 4\n")
    run(capsys, "train", fa, lab, "--config", cfg, "--q", 5, "--out", tmp_path / "m.rkn")
    assert load_model(tmp_path / "m.rkn").layers[0].q == 5


def test_train_unknown_config_key(tmp_path, capsys, synth):
    fa, lab = synth
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochz = 3\n")
    code, _, err = run(capsys, "train", fa, lab, "--config", cfg, "--out", tmp_path / "m.rkn")
    assert code == 2
    assert_one_line_error(err, "RKNError")
    assert "epochz" in err


def test_train_single_class(tmp_path, capsys, synth):
    fa, lab = synth
    one = tmp_path / "one.lab"
    one.write_text("".join(f"{line.split()[0]}\t1\n" for line in lab.read_text().splitlines()))
    code, _, err = run(capsys, "train", fa, one, "--out", tmp_path / "m.rkn")
    assert code == 2
    assert_one_line_error(err, "LabelMismatch")


def test_train_diverged_exit_code(tmp_path, capsys, synth, monkeypatch):
    import rkn.training as training

    fa, lab = synth
    monkeypatch.setattr(training, "_mean_loss", lambda model, ds, cfg: (float("inf"), None))
    code, _, err = run(capsys, "train", fa, lab, "--k", 3, "--q", 4, "--epochs", 1, "--out", tmp_path / "m.rkn")
    assert code == 3
    assert_one_line_error(err, "Diverged")


def test_embed_reload_bit_identical_and_concat(tmp_path, capsys, synth):
    fa, lab = synth
    model = tmp_path / "m.rkn"
    run(capsys, "train", fa, lab, "--out", model, "--k", 3, "--q", 4, "--epochs", 1)
    run(capsys, "embed", fa, model, "--out", tmp_path / "a.txt")
    run(capsys, "embed", fa, model, "--out", tmp_path / "b.txt", "--workers", 3)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    run(capsys, "embed", fa, model, "--out", tmp_path / "c.txt", "--concat")
    assert read_features(tmp_path / "c.txt")[1].shape == (40, 12)


def test_embed_unknown_symbol(tmp_path, capsys, synth):
    fa, lab = synth
    model = tmp_path / "m.rkn"
    run(capsys, "train", fa, lab, "--out", model, "--k", 3, "--q", 4, "--epochs", 1)
    bad = tmp_path / "bad.fa"
    bad.write_text(">z\nACGNT\n")
    code, _, err = run(capsys, "embed", bad, model, "--out", tmp_path / "x.txt")
    assert code == 2
    assert_one_line_error(err, "UnknownSymbol")
    assert "position 4" in err


def test_eval_routes_agree(tmp_path, capsys, synth):
    fa, lab = synth
    model = tmp_path / "u.rkn"
    run(capsys, "train", fa, lab, "--out", model, "--mode", "unsupervised", "--k", 3, "--q", 6)
    run(capsys, "embed", fa, model, "--out", tmp_path / "f.txt")
    code, a, _ = run(capsys, "eval", lab, "--fasta", fa, "--model", model, "--out", tmp_path / "r.txt")
    assert code == 0
    _, b, _ = run(capsys, "eval", lab, "--features", tmp_path / "f.txt", "--model", model)
    assert a == b
    assert "auroc=" in a and "n=40" in a
    assert (tmp_path / "r.txt").read_text().strip() == a.strip()


def test_eval_scores_file(tmp_path, capsys):
    (tmp_path / "s.txt").write_text("dims 4 1\na 0.9\nb 0.1\nc 0.8\nd 0.3\n")
    (tmp_path / "l.lab").write_text("a\t1\nb\t-1\nc\t1\nd\t-1\n")
    code, out, _ = run(capsys, "eval", tmp_path / "l.lab", "--features", tmp_path / "s.txt")
    assert code == 0 and "auroc=1.000000" in out and "auroc50=1.000000" in out


def test_eval_missing_label(tmp_path, capsys):
    (tmp_path / "s.txt").write_text("dims 2 1\na 0.9\nb 0.1\n")
    (tmp_path / "l.lab").write_text("a\t1\n")
    code, _, err = run(capsys, "eval", tmp_path / "l.lab", "--features", tmp_path / "s.txt")
    assert code == 2 and "'b'" in err


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 13
    assert float(lines[-1].split("=")[1]) <= 1e-4
