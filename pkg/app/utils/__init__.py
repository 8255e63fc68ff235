# Import utilities to make them available
from app.utils.errors import BevRegError
from app.utils.validation import validate_point, validate_points
