# Import models to make them available
from app.models.geometry import PointCloud, RigidTransform
from app.models.bev import BevConfig, BevGrid
from app.models.keypoint import Keypoint
from app.models.scan_pair import Scene, ScanPair
