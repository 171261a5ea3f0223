#!/usr/bin/env python3
"""Cross-modal consistency, made visible.

The difference of the two image-to-depth flows of an adjacent frame
pair equals, point for point, the optical flow between the frames once
the optical flow is warped onto the depth-map anchoring.  This script
builds a corridor scene, disturbs the initial pose by up to 2 m / 10
degrees, generates noiseless oracle flows, and prints the residual
statistics of the identity.  It then corrupts the optical flow and
shows the residual exposing the inconsistency.
"""
import numpy as np

from lidartrack.flow import FlowNoiseModel, apply_noise, consistency_residual, FlowTriplet
from lidartrack.geometry import CameraIntrinsics, PerturbBounds, perturb_pose
from lidartrack.mapping import CropExtents, GlobalMap, crop_local, downsample
from lidartrack.flow import oracle_flows
from lidartrack.synth import SceneConfig, TrajectoryConfig, generate_scene, generate_trajectory

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=480.0, cy=160.0, width=960, height=320)

print("building a corridor scene and a 0.1 m map ...")
scene = generate_scene(SceneConfig(extent=60.0, seed=3))
lidar_map = downsample(GlobalMap.build(scene), 0.1)
traj = generate_trajectory(TrajectoryConfig(frame_count=2, speed=0.25, seed=3))

T_init = perturb_pose(traj[0], PerturbBounds(2.0, 10.0), seed=42)
crop = crop_local(lidar_map, T_init, CropExtents())
print(f"map: {len(lidar_map)} points, crop: {len(crop)} points")

flows = oracle_flows(crop, K, T_init, traj[0], traj[1], FlowNoiseModel())
res = consistency_residual(flows)
m = res.valid
mags = np.hypot(res.du[m], res.dv[m])
print(f"\nnoiseless identity over {m.sum()} pixels:")
print(f"  max  |residual| = {mags.max():.4f} px")
print(f"  mean |residual| = {mags.mean():.4f} px")

sigma = 2.0
noisy_c2n = apply_noise(flows.f_c2n, FlowNoiseModel(gaussian_sigma=sigma, seed=7),
                        np.random.default_rng(7))
res2 = consistency_residual(FlowTriplet(flows.f_c2d, flows.f_n2d, noisy_c2n))
m2 = res2.valid
mags2 = np.hypot(res2.du[m2], res2.dv[m2])
print(f"\nafter corrupting the optical flow with {sigma} px noise:")
print(f"  mean |residual| = {mags2.mean():.4f} px "
      f"(the residual now mirrors the injected error)")
