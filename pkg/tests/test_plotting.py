import numpy as np

from nncertify.evaluation import MethodResult
from nncertify.plotting import plot_histogram, plot_margins, plot_report, plot_toy2d
from nncertify.toy import grid_points, make_toy2d

PNG = b"\x89PNG"


def test_figures_are_png_files(tmp_path):
    toy = make_toy2d(0, n_per_class=10)
    pts = grid_points(20)
    labels = (pts[:, 0] > 0.5).astype(int)
    paths = [
        plot_toy2d(pts, {"a": labels, "b": 1 - labels}, toy.train, 0.05, tmp_path / "toy.png"),
        plot_histogram(np.arange(256) / 255, np.arange(256), tmp_path / "sub" / "hist.png"),
        plot_histogram(np.arange(256) / 255, np.zeros(256), tmp_path / "empty.png"),
        plot_margins([100, 1000, 10000], [1.0, 1.5, 2.0], tmp_path / "margins.png"),
    ]
    r = MethodResult("normal")
    r.set("p", "ra_linf_test", 0.3)
    paths.append(plot_report([r, MethodResult("1nn")], tmp_path / "report.png"))
    for p in paths:
        assert p.read_bytes()[:4] == PNG
    assert not list(tmp_path.rglob("*.tmp.png"))
