"""Run a low-field scenario end to end and print per-slice recovery statistics.

Compares the strain maps with the scene's imaged ground truth: fraction of
valid pixels within 3 CI, median strain within 1 um of the boundary, and the
boundary trace for multi-slice scenarios.

    python scripts/run_scenario.py scenarios/fig5.json --threads 4
"""

import argparse
import time

import numpy as np

from nvstrain.config import load_config
from nvstrain.pipeline import run_scenario, summarize
from nvstrain.strainmap import assemble_3d


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if cfg.acquisition.mode != "low-field":
        raise SystemExit("run_scenario handles low-field scenarios; use `nvstrain pipeline` for high-field")
    t0 = time.perf_counter()
    _, grid, _, maps = run_scenario(cfg, args.threads)
    s = summarize(grid)
    print(f"{cfg.name}: median ci68 {s['median_ci68_khz']:.1f} kHz, valid {s['valid_fraction']:.3f}, "
          f"{time.perf_counter() - t0:.1f} s")
    scene = cfg.build_scene()
    for m in maps:
        ta, tn = scene.imaged_strain_grid(m.z_offset, m.pixel_size)
        v = m.validity_mask & np.isfinite(ta) & np.isfinite(tn)
        inside = ((np.abs(m.axial - ta) <= 3 * m.precision_axial)
                  & (np.abs(m.nonaxial - tn) <= 3 * m.precision_nonaxial))
        cover = float(inside[v].mean()) if v.any() else float("nan")
        p = m.pixel_size * 1e-3
        ny, nx = m.axial.shape
        yy, xx = np.meshgrid((np.arange(ny) + 0.5) * p, (np.arange(nx) + 0.5) * p, indexing="ij")
        pos = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, m.z_offset)], axis=1)
        near = (scene.strain_model.distance(pos).reshape(ny, nx) <= 1.0) & v
        if near.any():
            stats = (f"near boundary axial {np.median(m.axial[near]):.3e} (truth {np.median(ta[near]):.3e}), "
                     f"non-axial {np.median(m.nonaxial[near]):.3e} (truth {np.median(tn[near]):.3e})")
        else:
            stats = "no valid pixels near the boundary"
        print(f"  z={m.z_offset:g} um: {cover:.3f} of valid pixels within 3 CI; {stats}")
    if len(maps) > 1:
        print("  boundary trace (um):", np.round(assemble_3d(maps).boundary_trace().position, 2).tolist())


if __name__ == "__main__":
    main()
