"""
From point cloud to pseudo image
================================

The detector never convolves raw points. It bins them into vertical
pillars, decorates each point with offsets to the pillar's centroid and
center, and scatters learned pillar features onto a dense 2D grid the
convolutional trunk can treat as an image.
"""

import numpy as np

from poidet.kernels import Tensor, linear, masked_max, scatter_pillars
from poidet.pillars import PillarGridSpec, decorate, pillarize
from poidet.rng import Rng
from poidet.synth import SceneSpec, generate_scene

scene = generate_scene(SceneSpec(num_objects_min=4, num_objects_max=6,
                                 density=600.0), seed=42)

# The grid fixes the detector's world window and resolution. 0.5 m pillars
# over 40 x 40 m give an 80 x 80 pseudo image.
grid = PillarGridSpec()
print("grid: %d rows x %d cols, %.1f m pillars"
      % (grid.n_rows, grid.n_cols, grid.pillar_dx))

# Pillarization is seeded: overfull pillars subsample with a deterministic
# stream, so equal (points, grid, seed) give byte-identical tensors.
pillars = pillarize(scene.cloud, grid, seed=7)
print("pillars: %d occupied, data %s, coords %s"
      % (pillars.n_pillars, pillars.data.shape, pillars.coords.shape))
print("fill: min %d, median %d, max %d points per pillar"
      % (pillars.valid_counts.min(), np.median(pillars.valid_counts),
         pillars.valid_counts.max()))

# Decoration lifts raw (x, y, z, r) to 9 features per point: the raw four,
# offsets to the pillar's point centroid, and offsets to the pillar's
# geometric center. Padding slots stay exactly zero.
decorated = decorate(pillars, grid)
print("decorated: %s (9 features per point)" % (decorated.data.shape,))
pad = ~decorated.valid_mask()
print("padding still zero:", bool((decorated.data[:, pad] == 0).all()))

# A tiny pillar feature network: per-point linear + relu, then a masked max
# over each pillar's points. The mask keeps padding out of the max.
rng = Rng(3)
w = Tensor(rng.normals(16 * 9, sigma=0.1).reshape(16, 9))
b = Tensor(np.zeros(16))
points_flat = np.transpose(decorated.data, (1, 2, 0)).reshape(-1, 9)
per_point = linear(Tensor(points_flat), w, b).relu()
per_pillar = per_point.reshape(pillars.n_pillars, -1, 16)
pooled = masked_max(per_pillar, decorated.valid_mask())
print("pooled pillar features:", pooled.data.shape)

# Scatter writes each pillar's feature vector at its (row, col); empty
# cells stay zero. This is the "pseudo image" the backbone convolves.
image = scatter_pillars(pooled.transpose((1, 0)), pillars.coords,
                        (grid.n_rows, grid.n_cols))
print("pseudo image:", image.data.shape)
occupancy = (np.abs(image.data).sum(axis=0) > 0).mean()
print("occupied cells: %.1f%%" % (100 * occupancy))

# A crude ASCII render of channel energy: objects appear as short bright
# strokes (the visible edges), everything else stays dark.
energy = np.abs(image.data).sum(axis=0)
step = grid.n_rows // 20
for r in range(0, grid.n_rows, step):
    band = energy[r:r + step]
    cells = [band[:, c:c + step].sum() for c in range(0, grid.n_cols, step)]
    top = max(max(cells), 1e-9)
    print("".join(" .:*#"[min(int(4 * v / top), 4)] for v in cells))
