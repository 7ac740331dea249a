from .dmtet import TetGrid, SurfaceMesh, marching_tets, merge_parts, uniform_laplacian, save_mesh
from .sdf import SdfField, positional_encoding
from .softras import project_mesh, rasterize_features, soft_silhouette, zbuffer, occlusion_mask
from .stage1 import Stage1State, iou_loss, init_losses, run_stage1, transfer_parameters
