from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from visionreflect.cli import main
from visionreflect.store import (
    EmbeddingMatrix,
    load_embedding_matrix,
    save_embedding_matrix,
)


@pytest.fixture
def synthetic(tmp_path):
    """A small simulated dataset on disk; returns its directory."""
    data = tmp_path / "data"
    code = main(
        [
            "simulate",
            "--out-dir", str(data),
            "--n", "200",
            "--seed", "1",
            "--vocab-size", "60",
        ]
    )
    assert code == 0
    return data


def read_report(out_dir):
    return json.loads((out_dir / "report.json").read_text())


class TestSimulateCommand:
    def test_rates_within_two_points(self, tmp_path, capsys):
        data = tmp_path / "data"
        code = main(
            [
                "simulate",
                "--out-dir", str(data),
                "--n", "1000",
                "--top1-acc", "0.33",
                "--top5-contain", "0.75",
                "--seed", "1",
            ]
        )
        assert code == 0
        records = [
            json.loads(line)
            for line in (data / "preds.jsonl").read_text().splitlines()
        ]
        top1 = sum(r["candidates"][0][0] in r["true_labels"] for r in records) / 1000
        contained = (
            sum(
                any(c[0] in r["true_labels"] for c in r["candidates"])
                for r in records
            )
            / 1000
        )
        assert abs(top1 - 0.33) <= 0.02
        assert abs(contained - 0.75) <= 0.02

    def test_zero_items_valid_file(self, tmp_path):
        data = tmp_path / "data"
        assert main(["simulate", "--out-dir", str(data), "--n", "0", "--seed", "2"]) == 0
        assert (data / "preds.jsonl").read_text() == ""
        assert main(
            [
                "validate",
                "--preds", str(data / "preds.jsonl"),
                "--vocab", str(data / "vocab.txt"),
            ]
        ) == 0

    def test_same_flags_twice_identical_files(self, tmp_path):
        flags = ["--n", "100", "--seed", "5"]
        for name in ("a", "b"):
            assert main(["simulate", "--out-dir", str(tmp_path / name), *flags]) == 0
        assert (tmp_path / "a" / "preds.jsonl").read_bytes() == (
            tmp_path / "b" / "preds.jsonl"
        ).read_bytes()
        assert (tmp_path / "a" / "vocab.txt").read_bytes() == (
            tmp_path / "b" / "vocab.txt"
        ).read_bytes()


class TestValidateCommand:
    def test_valid_dataset(self, synthetic, capsys):
        code = main(
            [
                "validate",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
            ]
        )
        assert code == 0
        assert "ok:" in capsys.readouterr().out

    def test_invalid_dataset_exits_4(self, synthetic, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(
            '{"item_id":"x","candidates":[[9999,0.5]],"true_labels":[]}\n'
        )
        code = main(
            ["validate", "--preds", str(bad), "--vocab", str(synthetic / "vocab.txt")]
        )
        assert code == 4

    def test_unknown_flag_exits_2(self):
        assert main(["validate", "--nope"]) == 2


class TestReflectCommand:
    def test_perfect_oracle_reaches_containment(self, synthetic, tmp_path):
        out = tmp_path / "out"
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "oracle:recall=1,specificity=1,seed=3",
                "--threshold", "1.0",
                "--out-dir", str(out),
            ]
        )
        assert code == 0
        report = read_report(out)
        records = [
            json.loads(line)
            for line in (synthetic / "preds.jsonl").read_text().splitlines()
        ]
        contained = sum(
            any(c[0] in r["true_labels"] for c in r["candidates"][:5]) for r in records
        ) / len(records)
        assert report["reflected_accuracy"] == pytest.approx(round(contained, 4))

    def test_threshold_zero_is_baseline(self, synthetic, tmp_path):
        out = tmp_path / "out"
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "static:no",
                "--threshold", "0",
                "--out-dir", str(out),
            ]
        )
        assert code == 0
        report = read_report(out)
        assert report["reflected_accuracy"] == report["baseline_accuracy"]
        assert report["n_gated"] == 0

    def test_table3_shaped_oracle_improves_gated_subset(self, synthetic, tmp_path):
        out = tmp_path / "out"
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "oracle:recall=0.897,specificity=0.667,seed=7",
                "--threshold", "0.5",
                "--out-dir", str(out),
            ]
        )
        assert code == 0
        report = read_report(out)
        subset = report["subset"]
        assert subset["below_threshold_reflected"] > subset["below_threshold_baseline"]

    def test_idempotent_outputs(self, synthetic, tmp_path):
        args = [
            "reflect",
            "--preds", str(synthetic / "preds.jsonl"),
            "--vocab", str(synthetic / "vocab.txt"),
            "--verifier", "oracle:recall=0.9,specificity=0.6,seed=11",
            "--threshold", "0.6",
        ]
        for name in ("a", "b"):
            assert main([*args, "--out-dir", str(tmp_path / name)]) == 0
        for filename in ("traces.jsonl", "report.json", "report.csv"):
            assert (tmp_path / "a" / filename).read_bytes() == (
                tmp_path / "b" / filename
            ).read_bytes()

    def test_concurrency_does_not_change_traces(self, synthetic, tmp_path):
        args = [
            "reflect",
            "--preds", str(synthetic / "preds.jsonl"),
            "--vocab", str(synthetic / "vocab.txt"),
            "--verifier", "oracle:recall=0.8,specificity=0.7,seed=13",
            "--threshold", "1.0",
        ]
        assert main([*args, "--out-dir", str(tmp_path / "c1"), "--concurrency", "1"]) == 0
        assert main([*args, "--out-dir", str(tmp_path / "c4"), "--concurrency", "4"]) == 0
        assert (tmp_path / "c1" / "traces.jsonl").read_bytes() == (
            tmp_path / "c4" / "traces.jsonl"
        ).read_bytes()

    def test_unreachable_remote_verifier_exits_3(self, synthetic, tmp_path):
        out = tmp_path / "out"
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "http://127.0.0.1:9/verify",
                "--threshold", "0.08",
                "--out-dir", str(out),
            ]
        )
        assert code == 3
        assert (out / "report.json").exists()
        assert read_report(out)["n_failed"] > 0

    def test_bad_verifier_spec_exits_2(self, synthetic, tmp_path):
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "wizard:abracadabra",
                "--threshold", "0.5",
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert code == 2


class TestSweepCommand:
    def test_three_thresholds_three_rows(self, synthetic, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        code = main(
            [
                "sweep",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "oracle:recall=0.9,specificity=0.7,seed=5",
                "--thresholds", "0,0.5,1",
                "--out", str(out),
            ]
        )
        assert code == 0
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        issued = [int(r["queries_issued"]) for r in rows]
        assert issued == sorted(issued)

    def test_cached_second_run_issues_zero_queries(self, synthetic, tmp_path, capsys):
        cache = tmp_path / "cache.jsonl"
        args = [
            "sweep",
            "--preds", str(synthetic / "preds.jsonl"),
            "--vocab", str(synthetic / "vocab.txt"),
            "--verifier", "oracle:recall=0.9,specificity=0.7,seed=5",
            "--thresholds", "0.25,0.75",
            "--cache", str(cache),
        ]
        assert main([*args, "--out", str(tmp_path / "s1.csv")]) == 0
        first = capsys.readouterr().out
        assert "verifier_calls=" in first
        assert main([*args, "--out", str(tmp_path / "s2.csv")]) == 0
        second = capsys.readouterr().out
        assert "verifier_calls=0" in second
        assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


class TestReverseEmbedCommand:
    def _write_fixture(self, tmp_path, scale=1.0):
        rng = np.random.default_rng(3)
        table = rng.standard_normal((12, 6)).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(table), tmp_path / "table.emb")
        terms = "\n".join(f"term{c}" for c in "abcdefghijkl") + "\n"
        (tmp_path / "vocab.txt").write_text(terms)
        tokens = (table[[2, 5, 2]] * scale).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(tokens), tmp_path / "tokens.emb")

    def test_identity_fixture_recovers_terms(self, tmp_path, capsys):
        self._write_fixture(tmp_path)
        out = tmp_path / "report.jsonl"
        code = main(
            [
                "reverse-embed",
                "--tokens", str(tmp_path / "tokens.emb"),
                "--embeddings", str(tmp_path / "table.emb"),
                "--vocab", str(tmp_path / "vocab.txt"),
                "--question", "What is shown?",
                "--out", str(out),
                "--prompt-out", str(tmp_path / "prompt.txt"),
            ]
        )
        assert code == 0
        record = json.loads(out.read_text().splitlines()[0])
        assert record["key_terms"] == ["termc", "termf"]
        prompt = (tmp_path / "prompt.txt").read_text()
        assert prompt == "The image local features of termc, termf. What is shown?\n"

    def test_scaled_tokens_give_identical_report(self, tmp_path):
        self._write_fixture(tmp_path, scale=1.0)
        base_args = [
            "reverse-embed",
            "--embeddings", str(tmp_path / "table.emb"),
            "--vocab", str(tmp_path / "vocab.txt"),
            "--item-id", "fixed",
        ]
        out1 = tmp_path / "r1.jsonl"
        assert main(
            [*base_args, "--tokens", str(tmp_path / "tokens.emb"), "--out", str(out1)]
        ) == 0
        self._write_fixture(tmp_path, scale=5.0)
        out2 = tmp_path / "r2.jsonl"
        assert main(
            [*base_args, "--tokens", str(tmp_path / "tokens.emb"), "--out", str(out2)]
        ) == 0
        r1 = json.loads(out1.read_text())
        r2 = json.loads(out2.read_text())
        assert [m[1] for m in r1["per_token"]] == [m[1] for m in r2["per_token"]]
        assert r1["key_terms"] == r2["key_terms"]


class TestConnectorCommands:
    def _build(self, tmp_path, strategy="text_encoder"):
        rng = np.random.default_rng(7)
        (tmp_path / "vocab.txt").write_text("cat\ndog\nfox\n")
        key = rng.standard_normal((3, 4)).astype(np.float32)
        values = rng.standard_normal((3, 5)).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(key), tmp_path / "key.emb")
        save_embedding_matrix(EmbeddingMatrix(values), tmp_path / "values.emb")
        bundle = tmp_path / "bundle"
        code = main(
            [
                "connector-build",
                "--strategy", strategy,
                "--vocab", str(tmp_path / "vocab.txt"),
                "--values", str(tmp_path / "values.emb"),
                "--key", str(tmp_path / "key.emb"),
                "--out-dir", str(bundle),
            ]
        )
        assert code == 0
        return bundle, key

    def test_build_and_forward_roundtrip(self, tmp_path):
        bundle, key = self._build(tmp_path)
        rng = np.random.default_rng(8)
        xs = rng.standard_normal((6, 4)).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(xs), tmp_path / "xs.emb")
        outs = []
        for name in ("o1.jsonl", "o2.jsonl"):
            code = main(
                [
                    "connector-forward",
                    "--bundle", str(bundle),
                    "--inputs", str(tmp_path / "xs.emb"),
                    "--out", str(tmp_path / name),
                ]
            )
            assert code == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]

    def test_classifier_forward_matches_matvec_oracle(self, tmp_path):
        bundle, key = self._build(tmp_path, strategy="classifier")
        rng = np.random.default_rng(9)
        xs = rng.standard_normal((10, 4)).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(xs), tmp_path / "xs.emb")
        out = tmp_path / "out.jsonl"
        assert main(
            [
                "connector-forward",
                "--bundle", str(bundle),
                "--inputs", str(tmp_path / "xs.emb"),
                "--out", str(out),
            ]
        ) == 0
        loaded = load_embedding_matrix(bundle / "w_key.emb").values.astype(np.float64)
        for line in out.read_text().splitlines():
            record = json.loads(line)
            x = xs[record["row"]].astype(np.float64)
            assert record["vocab_index"] == int(np.argmax(loaded @ x))

    def test_exemplar_strategy_from_directory(self, tmp_path):
        rng = np.random.default_rng(10)
        (tmp_path / "vocab.txt").write_text("cat\ndog\n")
        values = rng.standard_normal((2, 3)).astype(np.float32)
        save_embedding_matrix(EmbeddingMatrix(values), tmp_path / "values.emb")
        exdir = tmp_path / "exemplars"
        exdir.mkdir()
        for i in range(2):
            block = rng.standard_normal((4, 6)).astype(np.float32)
            save_embedding_matrix(EmbeddingMatrix(block), exdir / f"term_{i:05d}.emb")
        code = main(
            [
                "connector-build",
                "--strategy", "exemplar",
                "--vocab", str(tmp_path / "vocab.txt"),
                "--values", str(tmp_path / "values.emb"),
                "--exemplars", str(exdir),
                "--out-dir", str(tmp_path / "bundle"),
            ]
        )
        assert code == 0
        meta = json.loads((tmp_path / "bundle" / "meta.json").read_text())
        assert meta == {
            "e_l": 3,
            "e_x": 6,
            "normalize_input": True,
            "strategy": "exemplar",
            "v": 2,
        }


class TestVerifierSpecs:
    def test_oracle_shorthand_accepted(self, synthetic, tmp_path):
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "oracle:recall=1,spec=1,seed=3",
                "--threshold", "0.2",
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert code == 0

    def test_oracle_requires_seed(self, synthetic, tmp_path):
        code = main(
            [
                "reflect",
                "--preds", str(synthetic / "preds.jsonl"),
                "--vocab", str(synthetic / "vocab.txt"),
                "--verifier", "oracle:recall=1,specificity=1",
                "--threshold", "0.2",
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert code == 2

    def test_endpoint_env_override(self, monkeypatch):
        from visionreflect.cli import build_verifier

        monkeypatch.setenv("VISIONREFLECT_ENDPOINT", "http://override:1/v")
        monkeypatch.setenv("VISIONREFLECT_TIMEOUT", "0.25")
        verifier = build_verifier("http:http://original:2/v", None)
        assert verifier.endpoint == "http://override:1/v"
        assert verifier.timeout == 0.25


class TestEvaluateCommand:
    def test_recomputed_report_matches_reflect_output(self, synthetic, tmp_path):
        out = tmp_path / "out"
        args = [
            "--preds", str(synthetic / "preds.jsonl"),
            "--vocab", str(synthetic / "vocab.txt"),
        ]
        assert main(
            [
                "reflect", *args,
                "--verifier", "oracle:recall=0.9,specificity=0.7,seed=3",
                "--threshold", "0.5",
                "--out-dir", str(out),
            ]
        ) == 0
        redo = tmp_path / "redo"
        assert main(
            [
                "evaluate", *args,
                "--traces", str(out / "traces.jsonl"),
                "--threshold", "0.5",
                "--out-dir", str(redo),
            ]
        ) == 0
        assert (out / "report.json").read_bytes() == (redo / "report.json").read_bytes()
