import json
import math

import numpy as np
import pandas as pd
import pytest

import downstream
import eval_harness
import harmonizer
import phantom
from errors import ContractError, DegenerateInputError
from style_manifold import StyleParams


def test_histogram_match_onto_itself(random_image):
    np.testing.assert_array_equal(eval_harness.histogram_match(random_image, random_image), random_image)


def test_histogram_match_takes_reference_values(rng, random_image):
    reference = rng.normal(0.5, 0.1, size=random_image.shape)
    out = eval_harness.histogram_match(random_image, reference)
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(reference.ravel()))
    # rank order of the source is preserved
    np.testing.assert_array_equal(np.argsort(out.ravel(), kind="stable"),
                                  np.argsort(random_image.ravel(), kind="stable"))


def test_histogram_match_is_idempotent(rng, random_image):
    reference = rng.uniform(size=random_image.shape) ** 2
    once = eval_harness.histogram_match(random_image, reference)
    np.testing.assert_array_equal(eval_harness.histogram_match(once, reference), once)


def test_histogram_match_ties_keep_index_order():
    out = eval_harness.histogram_match(np.zeros((2, 2)), np.array([[0.4, 0.1], [0.3, 0.2]]))
    np.testing.assert_array_equal(out, [[0.1, 0.2], [0.3, 0.4]])


def test_histogram_match_rejects_bad_reference(random_image):
    with pytest.raises(DegenerateInputError):
        eval_harness.histogram_match(random_image, np.full(random_image.shape, 0.3))
    with pytest.raises(ContractError):
        eval_harness.histogram_match(random_image, np.zeros((3, 3)))


def test_evaluate_pair_rows(small_model, small_bundle):
    pair = small_bundle.travel_pairs[0]
    rows = eval_harness.evaluate_pair(pair.target[0], pair.target[0], pair.labels[0],
                                      small_model, pair.target[0], pair_id=5)
    assert [r.method for r in rows] == list(eval_harness.METHODS)
    assert all(r.pair_id == 5 for r in rows)
    # source equal to target: nothing to correct
    assert all(r.psnr == math.inf for r in rows)
    assert all(r.ssim == pytest.approx(1.0) for r in rows)
    assert len({r.macro_dice for r in rows}) == 1


def test_evaluate_pair_shape_mismatch(small_model, small_bundle):
    pair = small_bundle.travel_pairs[0]
    with pytest.raises(ContractError):
        eval_harness.evaluate_pair(pair.source[0], pair.target[0][:32], pair.labels[0], small_model, pair.source[0])


@pytest.fixture(scope="module")
def bundle_rows(small_bundle, small_model):
    style = StyleParams(scale=1.2, gamma=0.9)
    return eval_harness.evaluate_bundle(small_bundle, small_model, style)


def test_evaluate_bundle_row_count(bundle_rows, small_bundle):
    assert len(bundle_rows) == 3 * len(small_bundle.travel_pairs)
    pair_ids = [r.pair_id for r in bundle_rows]
    assert pair_ids == sorted(pair_ids)


def test_identity_style_matches_unharmonized(small_bundle, small_model):
    rows = eval_harness.evaluate_bundle(small_bundle, small_model, StyleParams.identity())
    for k in range(0, len(rows), 3):
        none, _, tgtfree = rows[k:k + 3]
        assert (none.psnr, none.ssim, none.macro_dice) == (tgtfree.psnr, tgtfree.ssim, tgtfree.macro_dice)


def test_write_report(tmp_path, bundle_rows):
    summary = eval_harness.write_report(bundle_rows, tmp_path / "report.csv")
    frame = pd.read_csv(tmp_path / "report.csv")
    assert list(frame.columns) == list(eval_harness.REPORT_COLUMNS)
    assert len(frame) == len(bundle_rows)

    on_disk = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert on_disk == summary
    assert set(summary) == set(eval_harness.METHODS)
    dice = frame[frame["method"] == "tgtfree"]["macro_dice"]
    assert summary["tgtfree"]["macro_dice"]["mean"] == pytest.approx(dice.mean(), abs=1e-12)
    assert summary["tgtfree"]["macro_dice"]["std"] == pytest.approx(np.std(dice.to_numpy()), abs=1e-12)
    assert summary["tgtfree"]["macro_dice"]["n"] == len(dice)


def test_report_writes_inf_literal(tmp_path):
    rows = [eval_harness.EvalRow(0, m, math.inf, 1.0, 0.9, 0.8) for m in eval_harness.METHODS]
    eval_harness.write_report(rows, tmp_path / "report.csv", tmp_path / "s.json")
    lines = (tmp_path / "report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[1].split(",")[2] == "inf"


def test_report_is_byte_deterministic(tmp_path, bundle_rows):
    eval_harness.write_report(bundle_rows, tmp_path / "a" / "report.csv")
    eval_harness.write_report(bundle_rows, tmp_path / "b" / "report.csv")
    for name in ("report.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ContractError):
        eval_harness.write_report([], tmp_path / "report.csv")


def test_acceptance_summary(bundle_rows, small_bundle, small_model):
    d_in = eval_harness.in_domain_dice(small_bundle, small_model)
    assert 0.0 <= d_in <= 1.0
    gates = eval_harness.acceptance_summary(bundle_rows, d_in)
    assert set(gates) == {"in_domain_dice", "domain_gap", "harmonized_gain",
                          "harmonized_near_in_domain", "psnr_gain", "ssim_gain"}
    assert all(isinstance(g["passed"], bool) for g in gates.values())
    assert gates["in_domain_dice"]["value"] == d_in
    assert gates["domain_gap"]["threshold"] == pytest.approx(d_in - eval_harness.MIN_DOMAIN_GAP)


@pytest.mark.slow
def test_default_pipeline_moves_toward_target():
    bundle = phantom.build_scenario(phantom.Scenario(), master_seed=7)
    model = downstream.train(phantom.training_pairs(bundle.target_train))
    subject = bundle.source_labeled[0]
    result = harmonizer.harmonize(subject.image, subject.labels, model)
    rows = eval_harness.evaluate_bundle(bundle, model, result.best_params)
    gates = eval_harness.acceptance_summary(rows, eval_harness.in_domain_dice(bundle, model))
    failed = {name: gate for name, gate in gates.items() if not gate["passed"]}
    assert not failed
    summary = eval_harness.summarize(eval_harness.report_frame(rows))
    assert summary["tgtfree"]["psnr"]["mean"] >= summary["none"]["psnr"]["mean"] + eval_harness.MIN_PSNR_GAIN_DB
    assert summary["tgtfree"]["ssim"]["mean"] > summary["none"]["ssim"]["mean"]
