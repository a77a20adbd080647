import csv

import pytest
import yaml

from amodalseg.ablation import (
    METRIC_COLUMNS,
    TOGGLE_COLUMNS,
    AblationGrid,
    AblationRun,
    DataSpec,
    default_grid,
    load_grid,
    model_cache_key,
    results_table,
    run_ablation,
    run_config,
    table2_runs,
    with_runs,
)
from amodalseg.training import TrainConfig

TINY = {"iterations": 2, "roi_channels": 8, "head_width": 8, "n_priors": 2, "codebook_size": 4,
        "embedding_dim": 4}


def tiny_grid(tmp_path, runs):
    return AblationGrid(runs, seeds=(0,), data=DataSpec(6, 2, 3), base=dict(TINY), autoencoder_epochs=1,
                        cache_dir=str(tmp_path / "cache"), out_csv=str(tmp_path / "out.csv"))


def test_single_run_grid_gives_one_row_and_schema(tmp_path):
    rows = run_ablation(tiny_grid(tmp_path, [AblationRun("full")]))
    per_seed = [r for r in rows if r["seed"] != "mean"]
    assert len(per_seed) == 1 and len(rows) == 2
    with open(tmp_path / "out.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["name", "seed", *TOGGLE_COLUMNS, *METRIC_COLUMNS, "train_seconds"]
        assert len(list(reader)) == 2
    assert "full" in results_table(rows)


def test_cached_models_are_reused(tmp_path):
    grid = tiny_grid(tmp_path, [AblationRun("full"), AblationRun("no-rescoring", {"rescoring": False})])
    rows = run_ablation(grid)
    models = list((tmp_path / "cache" / "models").iterdir())
    # rescoring only acts at inference, so both runs share one trained model
    assert len(models) == 1
    again = run_ablation(grid)
    assert [r["AP"] for r in again] == [r["AP"] for r in rows]


def test_coarse_only_row_reports_toggles_off(tmp_path):
    rows = run_ablation(tiny_grid(tmp_path, [AblationRun("coarse-only", coarse_only=True)]))
    assert rows[0]["visible_attention"] is False and rows[0]["shape_prior_refine"] is False


def test_table2_grid_contents():
    names = [r.name for r in table2_runs()]
    assert len(names) == len(set(names))
    for must in ("full", "coarse-only", "no-shape-prior", "no-visible-attention", "both-self", "only-visible",
                 "cross"):
        assert must in names
    grid = default_grid()
    assert grid.seeds == (0, 1, 2)
    assert [r.name for r in with_runs(grid, ["cross", "full"]).runs] == ["full", "cross"]


def test_grid_yaml_round_trip(tmp_path):
    p = tmp_path / "grid.yaml"
    p.write_text(yaml.safe_dump({
        "seeds": [0, 1],
        "data": {"n_train": 10, "n_val": 4},
        "base": {"iterations": 5, "toggles": {"amodal_fm": False}},
        "runs": [{"name": "full"}, {"name": "x", "train": {"toggles": {"visible_fm": False}}}],
    }))
    grid = load_grid(p)
    assert grid.seeds == (0, 1) and grid.data.n_train == 10
    cfg = run_config(grid, grid.runs[1], 1)
    assert cfg.seed == 1 and cfg.iterations == 5
    assert cfg.toggles["amodal_fm"] is False and cfg.toggles["visible_fm"] is False
    with pytest.raises(ValueError, match="duplicate"):
        AblationGrid.from_dict({"runs": [{"name": "a"}, {"name": "a"}]})


def test_cache_key_ignores_inference_only_fields():
    a = model_cache_key("d", TrainConfig(), "cb")
    assert a == model_cache_key("d", TrainConfig(rescoring=False), "cb")
    assert a != model_cache_key("d", TrainConfig(reclass=False), "cb")
    assert a != model_cache_key("d", TrainConfig(seed=1), "cb")
    assert a != model_cache_key("d", TrainConfig(), "other")
