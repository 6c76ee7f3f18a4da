"""Label propagation for cell images by diffeomorphism-invariant matching and learned registration.

Submodules:

- ``diffeo_gen``: realistic deformations as dense warp fields (make, apply, compose, invert).
- ``patch_bank``: cell patches, label stacks, archetype banks and their on-disk format.
- ``invariant_net``: the deformation-invariant encoder, matching and retrieval metrics.
- ``mapping_net``: the learned registration network and a direct-optimization oracle.
- ``synth``: synthetic cells, scenes and evaluation metrics.
- ``pipeline``: counting, orientation transfer and few-shot segmentation.
- ``theory``: covering radius, Lipschitz estimates and the matching-error bound harness.
- ``cli``: the ``diffkillr`` command.
"""

__version__ = "0.1.0"
