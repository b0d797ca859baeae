import json

import numpy as np
import pytest

from ctatlas.atlas import AtlasBundle, accumulate
from ctatlas.deform import LevelSchedule
from ctatlas.fields import transfer_labels
from ctatlas.metrics import dice
from ctatlas.nifti import write_nifti
from ctatlas.pipeline import (CohortManifest, PipelineConfig, canonical_scores, place_on_atlas_grid,
                              register_subject)
from ctatlas.volume import Geometry, LabelMap, Volume

FAST = PipelineConfig(schedule=LevelSchedule(((6, 2, 2), (4, 1, 1))))


def test_config_round_trip_and_validation(tmp_path):
    cfg = PipelineConfig.from_dict(FAST.to_dict())
    assert cfg.to_dict() == FAST.to_dict()
    assert PipelineConfig().schedule.to_list()[0] == [8, 6, 5] and PipelineConfig().alpha == 0.5
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"windw": [-5, 5]})
    with pytest.raises(ValueError):
        PipelineConfig(window=(5.0, -5.0))
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"window": [-4, 4], "threads": 2}))
    assert PipelineConfig.load(p).window == (-4.0, 4.0)


def test_manifest_resolution_and_errors(tmp_path):
    g = Geometry((4, 4, 4))
    write_nifti(Volume(g, np.zeros(g.dims)), tmp_path / "a.nii")
    write_nifti(Volume(g, np.zeros(g.dims)), tmp_path / "s.nii")
    (tmp_path / "s.scores.json").write_text("[1, 2, 3, 4]")
    m = {"atlas": "a.nii", "subjects": [{"id": "x", "volume": "s.nii", "phase": "delayed"}]}
    (tmp_path / "m.json").write_text(json.dumps(m))
    man = CohortManifest.load(tmp_path / "m.json")
    assert man.subjects[0].scores == str(tmp_path / "s.scores.json")
    assert man.phases() == ["delayed"]
    for bad in ({**m, "subjects": m["subjects"] * 2},
                {**m, "subjects": [{"volume": "missing.nii"}]},
                {**m, "subjects": [{"volume": "s.nii", "phase": "venous"}]}):
        (tmp_path / "b.json").write_text(json.dumps(bad))
        with pytest.raises((ValueError, FileNotFoundError)):
            CohortManifest.load(tmp_path / "b.json")


def test_canonical_scores_follow_slice_direction():
    up = Geometry((2, 2, 3))
    down = Geometry((2, 2, 3), direction=np.diag([1.0, 1.0, -1.0]))
    np.testing.assert_array_equal(canonical_scores(up, [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(canonical_scores(down, [1, 2, 3]), [3, 2, 1])
    swapped = Geometry((2, 2, 3), direction=[[1, 0, 0], [0, 0, 1], [0, 1, 0]])
    with pytest.raises(ValueError):
        canonical_scores(swapped, [1, 2, 3])


def test_translated_subject_gets_accurate_labels(atlas_target):
    atlas, atlas_label = atlas_target
    g = atlas.geometry
    # subject = atlas content moved 4 voxels along +x in world space
    shift = np.array([4 * 2.75, 0.0, 0.0])
    sg = Geometry(g.dims, g.spacing, tuple(np.asarray(g.origin) + shift), g.direction)
    subject = Volume(sg, atlas.data)
    truth = LabelMap(sg, atlas_label.data)
    prepped = place_on_atlas_grid(subject, g)
    aff, u, registered = register_subject(atlas, prepped, FAST)
    out = transfer_labels(atlas_label, aff, u, sg)
    for organ in (2, 3):
        assert dice(out, truth, organ) > 0.95


def test_single_identical_subject_gives_target_mean(atlas_target):
    atlas = atlas_target[0]
    aff, u, registered = register_subject(atlas, atlas, FAST)
    b = accumulate(AtlasBundle.empty("portal_venous", atlas.geometry), Volume(atlas.geometry, registered.data))
    np.testing.assert_allclose(b.mean.data, atlas.data, atol=1e-3)
    assert b.variance.data.max() == 0.0
