import csv
import subprocess
import sys

import pytest

from treeagree.cli import main
from treeagree.grammar import builtin_vocab
from treeagree.models import save_checkpoint, zero_params
from treeagree.treebank import Label, read_corpus

SMALL = ["--n-train", "40", "--n-val", "10", "--n-hard", "10", "--n-ambig", "10",
         "--n-aug", "12", "--d-emb", "3", "--d-h", "3", "--eval-every", "20",
         "--max-epochs", "1", "--seeds", "0", "1"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_with_exclude(tmp_path, capsys):
    aug = tmp_path / "aug.jsonl"
    test = tmp_path / "test.jsonl"
    assert main(["gen", "--variant", "augmentation", "--n", "500", "--seed", "1",
                 "--out", str(aug)]) == 0
    assert main(["gen", "--variant", "test", "--n", "400", "--exclude", str(aug),
                 "--out", str(test)]) == 0
    a, t = read_corpus(aug), read_corpus(test)
    assert len(a) == 500 and len(t) == 400
    assert not {e.sentence for e in a} & {e.sentence for e in t}
    assert "label_share" in capsys.readouterr().out


def test_gen_zero_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--n", "0", "--out", str(tmp_path / "x.jsonl")])
    assert exc.value.code == 2
    assert "positive" in capsys.readouterr().err


def test_gen_unsatisfiable(tmp_path, capsys):
    code = main(["gen", "--n", "5", "--min-attractors", "9", "--max-attractors", "3",
                 "--out", str(tmp_path / "x.jsonl")])
    assert code != 0
    assert "attempts" in capsys.readouterr().err


def test_gen_minimal_disagree_and_pp_target(tmp_path):
    out = tmp_path / "amb.jsonl"
    assert main(["gen", "--n", "30", "--minimal-disagree", "--balance", "--out", str(out)]) == 0
    exs = read_corpus(out)
    assert all(len(e.tokens) == 5 for e in exs)
    out = tmp_path / "pp.jsonl"
    assert main(["gen", "--n", "300", "--pp-target", "--out", str(out)]) == 0


def test_stats_balanced(tmp_path, capsys):
    path = tmp_path / "c.jsonl"
    main(["gen", "--n", "50", "--balance", "--out", str(path)])
    capsys.readouterr()
    assert main(["stats", str(path)]) == 0
    out = capsys.readouterr().out
    assert "label_share,sg,0.5\n" in out and "label_share,pl,0.5\n" in out


def test_eval_zero_checkpoint(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    main(["gen", "--n", "40", "--balance", "--out", str(corpus)])
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, zero_params("constituency", builtin_vocab(), 3, 2))
    capsys.readouterr()
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus),
                 "--out", str(out)]) == 0
    table = rows(out)
    assert [r["split"] for r in table] == ["No", "Any", "1", "2", "3", "4+", "Constructed"]
    n_pl = sum(e.label == Label.PLURAL for e in read_corpus(corpus))
    assert n_pl == 20
    no, any_ = table[0], table[1]
    # every prediction is a tie, hence plural
    total = int(no["n"]) + int(any_["n"])
    assert total == 40
    hits = sum(float(r["accuracy"]) * int(r["n"]) for r in (no, any_) if int(r["n"]))
    assert round(hits) == 20


def test_missing_files_exit_nonzero(tmp_path, capsys):
    missing = str(tmp_path / "nope")
    assert main(["stats", missing]) != 0
    assert main(["eval", "--checkpoint", missing, "--corpus", missing]) != 0
    assert main(["finetune", "--checkpoint", missing, "--aug", missing,
                 "--out", str(tmp_path / "o")]) != 0
    assert "no such file" in capsys.readouterr().err


def test_malformed_corpus_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("[1, 2]\n")
    assert main(["stats", str(bad)]) == 2
    assert "bad.jsonl:1" in capsys.readouterr().err


def test_train_finetune_eval_chain(tmp_path, capsys):
    tr, va, aug = (tmp_path / f"{n}.jsonl" for n in ("train", "val", "aug"))
    main(["gen", "--n", "30", "--balance", "--out", str(tr)])
    main(["gen", "--n", "10", "--seed", "3", "--balance", "--exclude", str(tr), "--out", str(va)])
    main(["gen", "--variant", "augmentation", "--n", "10", "--out", str(aug)])
    ckpt, ft = tmp_path / "m.ckpt", tmp_path / "ft.ckpt"
    assert main(["train", "--model", "dependency", "--train", str(tr), "--val", str(va),
                 "--out", str(ckpt), "--d-emb", "3", "--d-h", "2", "--eval-every", "10",
                 "--max-epochs", "1", "--history", str(tmp_path / "h.csv")]) == 0
    assert len(rows(tmp_path / "h.csv")) == 3
    assert main(["finetune", "--checkpoint", str(ckpt), "--aug", str(aug),
                 "--out", str(ft)]) == 0
    assert "10 updates" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(ft), "--corpus", str(va),
                 "--constructed", str(va)]) == 0


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--d-h", "2", "--examples", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("max_rel_error") == 4 and "ok" in out


def test_experiments_smoke(tmp_path, monkeypatch):
    monkeypatch.setenv("TREEAGREE_OUTDIR", str(tmp_path / "unused"))
    out = tmp_path / "runs"
    code1 = main(["exp1", "--outdir", str(out)] + SMALL)
    report = rows(out / "exp1" / "report.csv")
    assert len(report) == 4 * 4 * 3
    assert {r["split"] for r in report} == {"train", "val", "test-hard", "ambig"}
    text = (out / "exp1" / "report.txt").read_text()
    assert code1 == (0 if "[FAIL]" not in text else 1)
    for m in ("bilstm", "dependency", "constituency", "headlex"):
        for s in (0, 1):
            assert (out / "exp1" / "checkpoints" / f"{m}-seed{s}.ckpt").exists()

    code2 = main(["exp2", "--outdir", str(out)] + SMALL)
    report2 = rows(out / "exp2" / "report.csv")
    assert len(report2) == 4 * 4 * 3
    assert all(abs(float(r["accuracy_after"]) - float(r["accuracy_before"]) - float(r["delta"]))
               < 1e-3 for r in report2)
    text2 = (out / "exp2" / "report.txt").read_text()
    assert "[PASS] one epoch of fine-tuning per checkpoint" in text2
    assert code2 == (0 if "[FAIL]" not in text2 else 1)
    assert not (tmp_path / "unused").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "treeagree", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
