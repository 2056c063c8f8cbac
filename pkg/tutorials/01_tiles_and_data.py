"""Tiles, fields of view and synthetic non-iid demand.

Run with ``python tutorials/01_tiles_and_data.py``.
"""
import numpy as np

from dmtfl_cache import GenConfig, TileGrid, fov_tiles, synth_noniid, tile_index

grid = TileGrid(8, 8)

# A head direction maps to one tile; a 100 degree window covers a block of them.
print("tile at yaw=0, pitch=0:", tile_index(0.0, 0.0, grid))
window = sorted(fov_tiles(0.0, 0.0, 100.0, grid))
print(f"100 degree view covers {len(window)} tiles:", window)

# Windows that cross the 180 degree seam wrap around to the left edge.
print("view centred on the seam:", sorted(fov_tiles(179.0, 0.0, 40.0, grid)))

# Small Dirichlet gamma gives base stations very different popular tiles.
for gamma in (0.3, 1e4):
    data = synth_noniid(GenConfig(B=2, grid=grid, gamma=gamma, samples_per_bs=400, seed=1))
    demand = [d.counts.sum(axis=0) / d.counts.sum() for d in data]
    print(f"gamma={gamma:g}: l1 gap between the two BS demand profiles = "
          f"{np.abs(demand[0] - demand[1]).sum():.3f}")

# Each sample pairs last window's normalised demand (x) with this window's (y).
d = data[0]
print("sample 0 features sum:", d.X[0].sum().round(3), " labels max:", d.Y[0].max())
