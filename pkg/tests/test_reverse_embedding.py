from __future__ import annotations

import itertools
import string

import numpy as np
import pytest

from visionreflect.reverse_embedding import (
    DimensionMismatchError,
    KeyTermOptions,
    NoKeyTermsError,
    VisionTokenBlock,
    build_replacement_prompt,
    extract_key_terms,
    load_key_term_reports,
    nearest_token,
    one_hot,
    row_normalize,
    save_key_term_reports,
    similarity_scores,
)
from visionreflect.store import EmbeddingMatrix, Vocabulary, matrix_from_rows


def letter_terms(n: int) -> Vocabulary:
    combos = itertools.product(string.ascii_lowercase, repeat=4)
    return Vocabulary(tuple("".join(c) for c in itertools.islice(combos, n)))


class TestRowNormalize:
    def test_three_four_five_triangle(self):
        out = row_normalize(matrix_from_rows([[3.0, 4.0]]))
        assert out.values[0] == pytest.approx([0.6, 0.8])

    def test_zero_row_stays_zero(self):
        out = row_normalize(matrix_from_rows([[0.0, 0.0], [1.0, 0.0]]))
        assert out.values[0].tolist() == [0.0, 0.0]

    def test_random_rows_have_unit_norm(self):
        rng = np.random.default_rng(3)
        m = EmbeddingMatrix(rng.standard_normal((5, 8)).astype(np.float32))
        out = row_normalize(m)
        norms = np.linalg.norm(out.values.astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)


class TestSimilarityScores:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(5)
        e = EmbeddingMatrix(rng.standard_normal((4, 6)).astype(np.float32))
        for j in range(4):
            scores = similarity_scores(e.values[j], e)
            assert scores[j] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_vector_scores_zero(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        scores = similarity_scores(np.array([0.0, 2.0]), e)
        assert scores[0] == pytest.approx(0.0, abs=1e-6)

    def test_argmax_matches_brute_force(self):
        rows = [[1.0, 0.0], [0.0, 1.0], [0.7071, 0.7071]]
        v = np.array([0.9, 0.1])
        scores = similarity_scores(v, matrix_from_rows(rows))
        brute = [
            float(np.dot(v, r) / (np.linalg.norm(v) * np.linalg.norm(r)))
            for r in np.asarray(rows)
        ]
        assert scores == pytest.approx(brute, abs=1e-6)
        assert int(np.argmax(scores)) == 0

    def test_scores_bounded_by_one(self):
        rng = np.random.default_rng(6)
        e = EmbeddingMatrix(rng.standard_normal((20, 5)).astype(np.float32))
        scores = similarity_scores(rng.standard_normal(5), e)
        assert np.all(np.abs(scores) <= 1 + 1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            similarity_scores(np.ones(3), matrix_from_rows([[1.0, 0.0]]))


class TestNearestToken:
    def test_roundtrip_over_distinct_rows(self):
        rng = np.random.default_rng(9)
        e = EmbeddingMatrix(rng.standard_normal((30, 12)).astype(np.float32))
        for i in range(30):
            hit = nearest_token(e.values[i], e)
            assert hit.vocab_index == i
            assert not hit.all_zero

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(10)
        e = EmbeddingMatrix(rng.standard_normal((8, 4)).astype(np.float32))
        v = rng.standard_normal(4)
        assert nearest_token(2.5 * v, e).vocab_index == nearest_token(v, e).vocab_index

    def test_tie_breaks_to_lowest_index(self):
        best = [5.0, 5.0]
        rows = [[1.0, 0.0], [0.0, 1.0], best, [0.5, 0.0], [0.0, 0.5], best]
        hit = nearest_token(np.array(best), matrix_from_rows(rows))
        assert hit.vocab_index == 2

    def test_zero_vector_flagged(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        hit = nearest_token(np.zeros(2), e)
        assert hit == (0, 0.0, True)

    def test_one_hot_contract(self):
        rng = np.random.default_rng(12)
        e = EmbeddingMatrix(rng.standard_normal((9, 3)).astype(np.float32))
        hit = nearest_token(rng.standard_normal(3), e)
        x = one_hot(hit.vocab_index, e.rows)
        assert x.sum() == 1.0
        assert x[hit.vocab_index] == 1.0


class TestExtractKeyTerms:
    def _block(self, rows, item_id="img1"):
        return VisionTokenBlock(item_id=item_id, tokens=matrix_from_rows(rows))

    def test_dedup_keeps_single_term(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        vocab = Vocabulary(("cap", "dog"))
        block = self._block([[0.9, 0.1], [0.8, 0.2], [0.99, 0.0]])
        report = extract_key_terms(block, e, vocab)
        assert report.key_terms == ("cap",)
        assert len(report.per_token) == 3

    def test_non_alphabetic_terms_dropped(self):
        e = matrix_from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        vocab = Vocabulary(("uniform", "##", "rally"))
        block = self._block([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        report = extract_key_terms(block, e, vocab)
        assert report.key_terms == ("uniform", "rally")

    def test_multiword_terms_survive_filter(self):
        e = matrix_from_rows([[1.0, 0.0]])
        vocab = Vocabulary(("bathing cap",))
        report = extract_key_terms(self._block([[1.0, 0.0]]), e, vocab)
        assert report.key_terms == ("bathing cap",)

    def test_min_similarity_filter(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        vocab = Vocabulary(("near", "far"))
        block = self._block([[1.0, 0.0], [0.6, 0.8]])
        report = extract_key_terms(
            block, e, vocab, KeyTermOptions(min_similarity=0.9)
        )
        assert report.key_terms == ("near",)

    def test_zero_token_produces_no_term(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        vocab = Vocabulary(("alpha", "beta"))
        report = extract_key_terms(self._block([[0.0, 0.0]]), e, vocab)
        assert report.key_terms == ()
        assert report.per_token == ((0, 0, 0.0),)

    def test_large_block_matches_per_row_oracle(self):
        rng = np.random.default_rng(42)
        e = EmbeddingMatrix(rng.standard_normal((32000, 32)).astype(np.float32))
        vocab = letter_terms(32000)
        tokens = rng.standard_normal((576, 32)).astype(np.float32)
        report = extract_key_terms(
            self._block(tokens), e, vocab, KeyTermOptions(drop_non_alphabetic=False)
        )
        assert len(report.per_token) == 576
        assert len(report.key_terms) <= 576
        table = e.values.astype(np.float64)
        table = table / np.linalg.norm(table, axis=1, keepdims=True)
        for row in (0, 1, 17, 123, 575):
            v = tokens[row].astype(np.float64)
            brute = table @ (v / np.linalg.norm(v))
            assert report.per_token[row].vocab_index == int(np.argmax(brute))
            assert report.per_token[row].similarity == pytest.approx(
                float(brute.max()), abs=1e-9
            )

    def test_determinism(self):
        rng = np.random.default_rng(1)
        e = EmbeddingMatrix(rng.standard_normal((50, 8)).astype(np.float32))
        vocab = letter_terms(50)
        tokens = rng.standard_normal((20, 8)).astype(np.float32)
        first = extract_key_terms(self._block(tokens), e, vocab)
        second = extract_key_terms(self._block(tokens), e, vocab)
        assert first == second

    def test_vocab_size_mismatch(self):
        e = matrix_from_rows([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DimensionMismatchError):
            extract_key_terms(self._block([[1.0, 0.0]]), e, Vocabulary(("only",)))


class TestReplacementPrompt:
    def _report(self, terms):
        from visionreflect.reverse_embedding import KeyTermReport

        return KeyTermReport(item_id="x", per_token=(), key_terms=tuple(terms))

    def test_two_terms_with_question(self):
        prompt = build_replacement_prompt(
            self._report(["cap", "uniform"]), "What is he wearing?"
        )
        assert prompt == "The image local features of cap, uniform. What is he wearing?"

    def test_single_term_empty_question(self):
        prompt = build_replacement_prompt(self._report(["dog"]), "")
        assert prompt == "The image local features of dog. "

    def test_no_terms_is_error(self):
        with pytest.raises(NoKeyTermsError):
            build_replacement_prompt(self._report([]), "Q?")

    def test_prompt_far_shorter_than_token_block(self):
        terms = [f"term{chr(97 + i % 26)}" for i in range(50)]
        prompt = build_replacement_prompt(self._report(terms), "What is shown?")
        # Crude whitespace tokenization: a 50-term prompt must stay far
        # below the 576 vision tokens it replaces.
        assert len(prompt.split()) < 576 / 4


class TestReportSerialization:
    def test_jsonl_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        e = EmbeddingMatrix(rng.standard_normal((10, 4)).astype(np.float32))
        vocab = letter_terms(10)
        tokens = rng.standard_normal((6, 4)).astype(np.float32)
        report = extract_key_terms(
            VisionTokenBlock(item_id="img9", tokens=EmbeddingMatrix(tokens)), e, vocab
        )
        path = tmp_path / "reports.jsonl"
        save_key_term_reports([report], path)
        assert load_key_term_reports(path) == [report]
