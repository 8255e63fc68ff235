from flask import Blueprint, request, jsonify, current_app
from flasgger import swag_from
from marshmallow import Schema, fields, validate, ValidationError

from app.services.pipeline_service import as_cloud, get_pipeline_service
from app.utils.validation import validate_points

registration_bp = Blueprint('registration', __name__)

POINTS_SCHEMA = {
    'type': 'array',
    'items': {'type': 'array', 'items': {'type': 'number'}, 'minItems': 3, 'maxItems': 3},
    'example': [[1.0, 2.0, -1.5], [4.0, 0.5, -1.6]]
}


class PairSchema(Schema):
    """Schema for validating a cloud pair."""
    points_p = fields.List(fields.Raw(), required=True, validate=validate_points)
    points_q = fields.List(fields.Raw(), required=True, validate=validate_points)


class RegisterSchema(PairSchema):
    """Schema for validating a registration request."""
    no_overlap_filter = fields.Bool(load_default=False)
    max_keypoints = fields.Int(load_default=None, validate=validate.Range(min=-1))
    seed = fields.Int(load_default=None, validate=validate.Range(min=0))


pair_schema = PairSchema()
register_schema = RegisterSchema()


@registration_bp.route('/register', methods=['POST'])
@swag_from({
    'tags': ['Registration'],
    'summary': 'Register two point clouds',
    'description': 'Estimate the rigid transform mapping cloud Q onto cloud P',
    'parameters': [
        {
            'name': 'body',
            'in': 'body',
            'required': True,
            'schema': {
                'type': 'object',
                'properties': {
                    'points_p': POINTS_SCHEMA,
                    'points_q': POINTS_SCHEMA,
                    'no_overlap_filter': {'type': 'boolean', 'example': False},
                    'max_keypoints': {'type': 'integer', 'example': 250},
                    'seed': {'type': 'integer', 'example': 13}
                },
                'required': ['points_p', 'points_q']
            }
        }
    ],
    'responses': {
        200: {
            'description': 'Registration report',
            'schema': {
                'type': 'object',
                'properties': {
                    'transform': {'type': 'array', 'items': {'type': 'array', 'items': {'type': 'number'}}},
                    'inliers': {'type': 'integer'},
                    'correspondences': {'type': 'integer'},
                    'inlier_ratio': {'type': 'number'},
                    'iterations': {'type': 'integer'},
                    'tau': {'type': 'number'},
                    'success': {'type': 'boolean'}
                }
            }
        },
        400: {
            'description': 'Invalid request or empty cloud',
            'schema': {
                'type': 'object',
                'properties': {
                    'error': {'type': 'string'},
                    'message': {'type': 'string'}
                }
            }
        }
    }
})
def register():
    """Register two point clouds."""
    data = request.get_json(silent=True) or {}

    # Validate input data
    try:
        validated_data = register_schema.load(data)
    except ValidationError as err:
        return jsonify({'error': err.messages}), 400

    report = get_pipeline_service().register(
        as_cloud(validated_data['points_p']),
        as_cloud(validated_data['points_q']),
        no_overlap_filter=validated_data['no_overlap_filter'],
        max_keypoints=validated_data['max_keypoints'],
        seed=validated_data['seed']
    )
    current_app.logger.info(f"Registration request done, success={report.result.success}")
    return jsonify(report.to_dict()), 200


@registration_bp.route('/similarity', methods=['POST'])
@swag_from({
    'tags': ['Registration'],
    'summary': 'Overlap similarity of two point clouds',
    'description': 'Mean overlap score of both clouds, usable as a loop-closure score',
    'parameters': [
        {
            'name': 'body',
            'in': 'body',
            'required': True,
            'schema': {
                'type': 'object',
                'properties': {
                    'points_p': POINTS_SCHEMA,
                    'points_q': POINTS_SCHEMA
                },
                'required': ['points_p', 'points_q']
            }
        }
    ],
    'responses': {
        200: {
            'description': 'Similarity score',
            'schema': {
                'type': 'object',
                'properties': {
                    'tau': {'type': 'number'}
                }
            }
        },
        400: {
            'description': 'Invalid request or empty cloud',
            'schema': {
                'type': 'object',
                'properties': {
                    'error': {'type': 'string'}
                }
            }
        }
    }
})
def similarity():
    """Score the overlap of two point clouds."""
    data = request.get_json(silent=True) or {}

    try:
        validated_data = pair_schema.load(data)
    except ValidationError as err:
        return jsonify({'error': err.messages}), 400

    tau = get_pipeline_service().similarity(as_cloud(validated_data['points_p']),
                                            as_cloud(validated_data['points_q']))
    return jsonify({'tau': tau}), 200
