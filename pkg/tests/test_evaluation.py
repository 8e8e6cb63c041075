import numpy as np
import pytest
import torch

from maskdiff.evaluation import MetricReport, evaluate_pipeline, render_text_table, write_report
from maskdiff.errors import ConfigError
from maskdiff.metrics import ClassifierConfig, FeatureExtractor, SmallCnn
from maskdiff.phantoms import PhantomDataset, generate_dataset


@pytest.fixture(scope="module")
def micro_clf():
    config = ClassifierConfig(image_size=32, base_width=8)
    torch.manual_seed(0)
    clf = FeatureExtractor(config, SmallCnn(config), {"note": "random init"})
    return clf


@pytest.fixture(scope="module")
def micro_eval_dataset(micro_spec):
    samples = generate_dataset(micro_spec, 36, seed_base=500)
    return PhantomDataset(spec=micro_spec, samples=samples, fingerprint="test")


@pytest.fixture(scope="module")
def micro_report(micro_eval_dataset, micro_models, micro_clf, micro_sched):
    return evaluate_pipeline(
        micro_eval_dataset, micro_models, micro_clf, micro_sched,
        suite_size=12, seed=3, s=5, msssim_levels=1,
        monotonicity_s=(0, 5), blur_sigma=1.5, box_sweep_positions=2,
    )


class TestEvaluatePipeline:
    def test_rows_present_and_finite(self, micro_report):
        assert [r.name for r in micro_report.rows] == ["two_stage_guided", "unconditional"]
        for row in micro_report.rows:
            assert row.n == 12
            assert np.isfinite(row.ms_ssim) and np.isfinite(row.frechet) and np.isfinite(row.dice_mean)
            assert np.isfinite(row.f1_macro)

    def test_controls_and_sections(self, micro_report):
        assert micro_report.controls["frechet_real_vs_real"] >= 0
        assert set(micro_report.monotonicity["dice_by_s"]) == {"0", "5"}
        assert micro_report.dissociation["n"] > 0
        assert micro_report.locality["n_items"] >= 1
        assert 0 <= micro_report.locality["anatomy_preservation_dice"] <= 1
        assert micro_report.sanity["union_fraction_violations"] >= 0

    def test_report_roundtrip_and_rendering(self, micro_report, tmp_path):
        text = render_text_table(micro_report)
        assert "two_stage_guided" in text and "unconditional" in text
        paths = write_report(micro_report, tmp_path)
        loaded = MetricReport.load(paths["json"])
        assert loaded.to_dict() == micro_report.to_dict()
        assert (tmp_path / "report.txt").read_text().strip()
        assert (tmp_path / "report_rows.csv").read_text().count("\n") == 3

    def test_suite_size_validation(self, micro_eval_dataset, micro_models, micro_clf, micro_sched):
        with pytest.raises(ConfigError):
            evaluate_pipeline(micro_eval_dataset, micro_models, micro_clf, micro_sched,
                              suite_size=40, msssim_levels=1)
