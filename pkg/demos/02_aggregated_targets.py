"""Build the aggregated reconstruction target for a key frame.

The training target for the autoencoder is not the input scan: it is the
union of pose-aligned neighboring frames, cropped to a scope sphere and
voxel-downsampled. This script shows how much geometry the aggregate adds
over the single scan, and what the disturbance protocol does to it.
"""

import numpy as np

from distreg import simulate as sim
from distreg.aggregate import ApgConfig, DisturbConfig, apc_coverage_gain, generate_apc, select_nonkey_frames
from distreg.geometry import voxel_downsample

world = sim.simulate_world(seed=11, extent=100.0, n_obstacles=24)
lidar = sim.LidarConfig(azimuth_steps=512, elevation_angles=tuple(np.linspace(-12.0, 3.0, 10)))
seq = sim.simulate_sequence(
    world, sim.line_trajectory((-35.0, 0.0), 0.0, 1.0, 71), lidar, seed=11)

cfg = ApgConfig(psi=3, alpha=10.0, scope_radius=50.0, voxel_size=0.3)
key = 35

selected = select_nonkey_frames(seq, key, cfg)
print(f"key frame {key}; selected non-key frames at ~10/20/30 m each side: {selected}")

apc = generate_apc(seq, key, cfg)
key_cloud = seq[key].cloud
key_cropped = key_cloud[np.linalg.norm(key_cloud, axis=1) <= cfg.scope_radius]
key_vox = voxel_downsample(key_cropped, cfg.voxel_size)

print(f"key frame: {len(key_vox)} voxels; aggregate: {len(apc)} voxels")
gain = apc_coverage_gain(key_cropped, apc, tau=0.3)
print(f"coverage gain: {gain:.1%} of aggregate points are geometry the key frame never saw")

# The robustness protocol rotates a few of the aggregated frames at random,
# emulating failed alignment of non-key frames.
for n_disturb in (0, 2, 4):
    disturbed = generate_apc(seq, key, cfg, DisturbConfig(n_disturb, seed=1))
    print(f"n_disturb={n_disturb}: aggregate has {len(disturbed)} voxels")
