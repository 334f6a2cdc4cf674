"""mpgan: learn 3D voxel shape distributions from unannotated silhouette images.

A single generator is trained against several per-view discriminators, each
judging silhouettes rendered through a differentiable orthographic projection.
An iteratively co-trained view classifier assigns unannotated training images
to the discriminators, so no viewpoint labels are required.
"""

__version__ = "0.1.0"
