import json
import re

import numpy as np
import pytest

from peftlab.checkpoint import load_checkpoint
from peftlab.cli import main
from peftlab.metrics import EvalRecord, write_records_tsv

TINY = [
    '--corpus.sizes={"train":32,"val":16,"test":16}',
    "--model.width=8",
    "--model.heads=2",
    "--adapter.r=2",
    "--adapter.heads=2",
    "--optimizer.epochs=1",
    "--pretrain.epochs=1",
    "--pretrain.max_frames=240",
    "--seed=5",
]


def _digest_from(output: str) -> str:
    match = re.search(r"corpus digest ([0-9a-f]{64})", output)
    assert match, output
    return match.group(1)


def test_full_pipeline_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PEFTLAB_OUT", str(tmp_path))

    assert main(["generate-data", *TINY]) == 0
    first = _digest_from(capsys.readouterr().out)
    assert main(["generate-data", *TINY]) == 0
    assert _digest_from(capsys.readouterr().out) == first
    assert (tmp_path / "corpus" / "manifest.json").exists()
    assert (tmp_path / "corpus" / "features.bin").exists()

    assert main(["pretrain", *TINY]) == 0
    out = capsys.readouterr().out
    assert "holdout accuracy" in out
    stored, meta = load_checkpoint(tmp_path / "backbone.ckpt")
    assert meta["kind"] == "backbone"
    backbone_trainable = sum(flag for name, (_, flag) in stored.items()
                             if not name.startswith("head."))
    assert backbone_trainable == 0

    assert main(["train", *TINY, "--adapter.kind=lora"]) == 0
    capsys.readouterr()
    run = tmp_path / "runs" / "lora"
    report = json.loads((run / "train_report.json").read_text())
    assert len(report["curve"]) == 1
    assert report["params"]["trainable"] > 0
    stored, meta = load_checkpoint(run / "checkpoint.bin")
    assert meta["config"]["adapter"]["kind"] == "lora"

    assert main(["evaluate", *TINY, "--adapter.kind=lora"]) == 0
    out = capsys.readouterr().out
    assert "in_template" in out and "out_of_template" in out
    metrics_a = (run / "metrics.json").read_bytes()
    assert (run / "predictions.tsv").exists()
    assert main(["evaluate", *TINY, "--adapter.kind=lora"]) == 0
    capsys.readouterr()
    assert (run / "metrics.json").read_bytes() == metrics_a

    assert main(["ablate", *TINY, "--methods=lora,none"]) == 0
    out = capsys.readouterr().out
    table = (tmp_path / "ablate" / "ablation.csv").read_text().splitlines()
    assert table[0].startswith("variant,")
    assert len(table) == 3
    # the all-frozen policy cannot train (no adapter params besides the head
    # is fine, "none" trains head only) so both rows should be ok
    assert all(",ok" in line or line.endswith("ok") or "failed" not in line
               for line in table[1:])


def test_ablate_operator_sweep_isolated_failure(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PEFTLAB_OUT", str(tmp_path))
    assert main(["generate-data", *TINY]) == 0
    assert main(["pretrain", *TINY]) == 0
    capsys.readouterr()
    assert main(["ablate", *TINY, "--operators=identity,bogus"]) == 0
    out = capsys.readouterr().out
    assert "FAILED" in out
    rows = (tmp_path / "ablate" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 3
    assert "temporal_dora:identity" in rows[1] and "ok" in rows[1]
    assert "temporal_dora:bogus" in rows[2] and "failed" in rows[2]


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck", "--seeds=1"]) == 0
    out = capsys.readouterr().out
    for kind in ("lora", "dora", "st_adapter", "temporal_dora", "lora_mha", "dora_mha"):
        assert kind in out
    assert "FAIL" not in out


def test_param_audit_command(capsys):
    assert main(["param-audit"]) == 0
    out = capsys.readouterr().out
    assert re.search(r"temporal_dora\s+800", out)
    assert re.search(r"\blora\s+512", out)
    assert "ordering: temporal_dora < st_adapter" in out


def test_report_command_oracle_predictions(tmp_path, capsys):
    records = [EvalRecord(prediction="yes, a tool is visible.",
                          reference="yes, a tool is visible.",
                          phrasing=p, question_type="tool")
               for p in ("in_template", "out_of_template")]
    write_records_tsv(tmp_path / "preds.tsv", records)
    assert main(["report", "--records", str(tmp_path / "preds.tsv"),
                 "--out", str(tmp_path / "rep")]) == 0
    report = json.loads((tmp_path / "rep" / "metrics.json").read_text())
    for split in ("in_template", "out_of_template"):
        values = report["splits"][split]
        assert values["bleu4"] == pytest.approx(1.0)
        assert values["rouge_l"] == pytest.approx(1.0)
        assert values["keyword_acc"] == pytest.approx(1.0)
        # self-match score carries the declared fragmentation penalty
        assert values["meteor_lite"] == pytest.approx(1.0 - 0.5 / 5 ** 3)


def test_unknown_override_rejected(tmp_path, monkeypatch):
    monkeypatch.setenv("PEFTLAB_OUT", str(tmp_path))
    with pytest.raises((SystemExit, ValueError)):
        main(["generate-data", "--bogus.key=1"])
    with pytest.raises(SystemExit):
        main(["train", *TINY])  # no corpus yet


def test_missing_corpus_is_explicit(tmp_path, monkeypatch):
    monkeypatch.setenv("PEFTLAB_OUT", str(tmp_path / "empty"))
    with pytest.raises(SystemExit, match="generate-data"):
        main(["pretrain"])
