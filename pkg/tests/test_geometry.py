import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskdrive.classes import ROAD, UNKNOWN, SemanticImage
from deskdrive.formats import ConfigError
from deskdrive.geometry import (
    DESK_CAMERA,
    BevGridSpec,
    CameraCalibration,
    GroundPoint,
    backproject,
    ground_to_pixel,
    in_view_cells,
    ipm_project,
    pixel_to_ground,
    project_ground,
    read_calibration,
    write_calibration,
)

CAL = CameraCalibration(fx=500, fy=500, cx=320, cy=240, width=640, height=480, h=1.7)


def test_straight_ahead_hits_principal_column():
    u, v = ground_to_pixel(GroundPoint(7.0, 0.0), CAL)
    assert u == pytest.approx(320.0, abs=1e-12)


def test_behind_camera_is_out_of_view():
    assert ground_to_pixel(GroundPoint(-3.0, 0.0), CAL) is None
    assert ground_to_pixel(GroundPoint(0.0, 1.0), CAL) is None


def test_pinhole_worked_example():
    u, v = ground_to_pixel(GroundPoint(10.0, 0.0), CAL)
    assert v == pytest.approx(240 + 500 * 1.7 / 10, abs=1e-12)
    assert v == pytest.approx(325.0, abs=1e-12)


def test_outside_image_bounds_is_out_of_view():
    assert ground_to_pixel(GroundPoint(2.0, 50.0), CAL) is None
    # too close: projects below the bottom row
    assert ground_to_pixel(GroundPoint(1.0, 0.0), CAL) is None


def test_inverse_worked_example():
    p = pixel_to_ground(320, 325, CAL)
    assert p.x == pytest.approx(10.0, abs=1e-12)
    assert p.y == pytest.approx(0.0, abs=1e-12)


def test_horizon_and_sky_rows_do_not_hit_ground():
    assert pixel_to_ground(100, 240, CAL) is None
    assert pixel_to_ground(100, 10, CAL) is None


def test_left_is_left_in_image():
    u, _ = ground_to_pixel(GroundPoint(10.0, 2.0), CAL)
    assert u < CAL.cx


def test_rows_move_toward_horizon_with_distance():
    xs = np.linspace(4, 80, 200)
    _, v, ok = project_ground(xs, np.zeros_like(xs), CAL)
    assert ok.all()
    assert np.all(np.diff(v) < 0)
    assert np.all(v > CAL.cy)


@settings(max_examples=200, deadline=None)
@given(
    alpha=st.floats(-0.3, 0.6),
    beta=st.floats(-0.3, 0.3),
    h=st.floats(0.3, 3.0),
    u=st.floats(0, 639),
    v=st.floats(0, 479),
)
def test_round_trip_any_mounting(alpha, beta, h, u, v):
    cal = CameraCalibration(500, 520, 320, 240, 640, 480, h, alpha, beta)
    p = pixel_to_ground(u, v, cal)
    if p is None or math.hypot(p.x, p.y) > 1e4:
        return
    back = ground_to_pixel(p, cal)
    assert back is not None
    assert back[0] == pytest.approx(u, abs=1e-6)
    assert back[1] == pytest.approx(v, abs=1e-6)
    q = pixel_to_ground(*back, cal)
    assert math.hypot(q.x - p.x, q.y - p.y) <= 1e-9 * max(1.0, math.hypot(p.x, p.y))


def test_pitch_down_moves_points_and_horizon_up():
    tilted = CameraCalibration(500, 500, 320, 240, 640, 480, 1.7, alpha=0.1)
    _, v0 = ground_to_pixel(GroundPoint(10, 0), CAL)
    _, v1 = ground_to_pixel(GroundPoint(10, 0), tilted)
    assert v1 < v0
    # horizon sits fy*tan(alpha) above cy
    row = 240 - 500 * math.tan(0.1)
    assert pixel_to_ground(320, row + 0.5, tilted).x > 100
    assert pixel_to_ground(320, row - 0.5, tilted) is None


@pytest.mark.parametrize("bad", [
    dict(fx=0), dict(fy=-1), dict(cx=640), dict(cy=-1), dict(h=0), dict(alpha=1.6), dict(beta=-1.6),
])
def test_calibration_invariants(bad):
    args = dict(fx=500, fy=500, cx=320, cy=240, width=640, height=480, h=1.7)
    args.update(bad)
    with pytest.raises(ValueError):
        CameraCalibration(**args)


def test_uniform_road_image_fills_view():
    grid = BevGridSpec()
    seg = SemanticImage(np.full((CAL.height, CAL.width), ROAD, np.uint8))
    bev = ipm_project(seg, CAL, grid)
    mask = in_view_cells(CAL, grid)
    assert mask.any() and not mask.all()
    assert np.all(bev.labels[mask] == ROAD)
    assert np.all(bev.labels[~mask] == UNKNOWN)


def test_blank_image_gives_blank_map():
    bev = ipm_project(SemanticImage.blank(CAL.width, CAL.height), CAL)
    assert np.all(bev.labels == UNKNOWN)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ipm_project(SemanticImage.blank(10, 10), CAL)


def test_single_pixel_lights_exactly_one_cell():
    # 0.2 m cells so that (10, 0) is an interior cell center
    grid = BevGridSpec(extent=21.0, cells=105)
    u, v = ground_to_pixel(GroundPoint(10.0, 0.0), CAL)
    labels = np.full((CAL.height, CAL.width), UNKNOWN, np.uint8)
    labels[int(math.floor(v + 0.5)), int(math.floor(u + 0.5))] = ROAD
    bev = ipm_project(SemanticImage(labels), CAL, grid)
    hits = []
    xs, ys = grid.centers()
    for i in range(grid.cells):
        for j in range(grid.cells):
            if bev.labels[i, j] == ROAD:
                hits.append((i, j))
    assert hits == [grid.cell_of(10.0, 0.0)]
    i, j = hits[0]
    assert abs(xs[i, j] - 10.0) <= grid.cell_size / 2
    assert abs(ys[i, j]) <= grid.cell_size / 2


def test_forward_fan_is_connected_and_ahead():
    from scipy import ndimage

    mask = in_view_cells(DESK_CAMERA)
    _, n = ndimage.label(mask)
    assert n == 1
    xs, _ = BevGridSpec().centers()
    assert np.all(xs[mask] > 0)


def test_ipm_deterministic():
    rng = np.random.default_rng(3)
    seg = SemanticImage(rng.integers(0, 12, (CAL.height, CAL.width), dtype=np.uint8))
    a = ipm_project(seg, CAL).labels
    b = ipm_project(seg, CAL).labels
    assert a.tobytes() == b.tobytes()


def test_grid_orientation():
    grid = BevGridSpec()
    assert grid.cell_size == pytest.approx(20 / 192)
    assert grid.cell_of(9.99, 9.99) == (0, 0)
    assert grid.cell_of(-9.99, -9.99) == (191, 191)
    assert grid.cell_of(10.5, 0) is None


def test_backproject_vectorized_matches_scalar():
    us = np.array([10.0, 320.0, 600.0])
    vs = np.array([300.0, 400.0, 470.0])
    x, y, ok = backproject(us, vs, CAL)
    for k in range(3):
        p = pixel_to_ground(us[k], vs[k], CAL)
        assert (p.x, p.y) == (x[k], y[k])
    assert ok.all()


def test_calibration_file_round_trip(tmp_path):
    cal = CameraCalibration(480.5, 470.25, 319.5, 239.5, 640, 480, 1.7, 0.05, -0.01)
    path = tmp_path / "cam.cfg"
    write_calibration(path, cal)
    text = path.read_text()
    assert text.startswith("#")
    assert read_calibration(path) == cal


def test_calibration_file_errors(tmp_path):
    path = tmp_path / "cam.cfg"
    path.write_text("fx = 500\n")
    with pytest.raises(ConfigError):
        read_calibration(path)
    path.write_text("fx=1\nfy=1\ncx=0\ncy=0\nwidth=4\nheight=4\nh=-1\n")
    with pytest.raises(ConfigError):
        read_calibration(path)
    with pytest.raises(ConfigError):
        read_calibration(tmp_path / "missing.cfg")
