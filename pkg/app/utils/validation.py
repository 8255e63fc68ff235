import math

from marshmallow import ValidationError


def validate_point(point):
    """
    Validate one point given as [x, y, z].

    Args:
        point: the decoded JSON value

    Returns:
        tuple: (bool, str) - (is_valid, error_message)
    """
    if not isinstance(point, (list, tuple)) or len(point) != 3:
        return False, "Each point must be a list of three numbers."
    for value in point:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False, "Point coordinates must be numbers."
        if not math.isfinite(value):
            return False, "Point coordinates must be finite."
    return True, "Point is valid."


def validate_points(points):
    """
    Marshmallow validator for a list of [x, y, z] points.

    Raises:
        ValidationError: naming the first offending point
    """
    if not isinstance(points, list):
        raise ValidationError("Points must be a list of [x, y, z] triples.")
    for index, point in enumerate(points):
        ok, message = validate_point(point)
        if not ok:
            raise ValidationError(f"Point {index}: {message}")
