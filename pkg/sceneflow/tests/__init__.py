"""
Sceneflow Tests

Test suite for the sceneflow app, covering:
- Core geometry and domain types
- Frame, weight and flow files, and the synthetic scene generator
- Voxelization, virtual-voxel fusion and sparse convolution (against dense oracles)
- The full network, its gradients and the toy training loop
- Metrics (against naive per-point oracles), run configuration and commands

Long desk-scale runs are enabled with SCENEFLOW_ACCEPTANCE=1.
"""
