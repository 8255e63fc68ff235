import json
import pytest
from unittest.mock import patch

import numpy as np

from app import create_app
from app.services.pipeline_service import PipelineService


@pytest.fixture
def client():
    app = create_app('testing')
    PipelineService.reset_instance()

    with app.test_client() as client:
        with app.app_context():
            yield client
    PipelineService.reset_instance()


@pytest.fixture
def points():
    rng = np.random.default_rng(2)
    return rng.uniform((-7, -7, -1.5), (7, 7, 1.5), size=(500, 3)).tolist()


def post(client, url, body):
    return client.post(url, data=json.dumps(body), content_type='application/json')


def test_health(client):
    """Test the health endpoint."""
    response = client.get('/health')

    assert response.status_code == 200
    data = json.loads(response.data)
    assert data['status'] == 'healthy'
    assert data['preset'] == 'testing'
    assert data['grid'] == [16, 16, 8]
    assert data['checkpoint'] is None
    assert len(data['digest']) == 64


def test_index_redirects_to_docs(client):
    """Test that the root redirects to the API docs."""
    response = client.get('/')

    assert response.status_code == 302
    assert response.headers['Location'].endswith('/docs/')


def test_apispec_lists_routes(client):
    """Test that the OpenAPI document lists both endpoints."""
    response = client.get('/apispec.json')

    assert response.status_code == 200
    paths = json.loads(response.data)['paths']
    assert '/api/register' in paths
    assert '/api/similarity' in paths


def test_register_identical_clouds(client, points):
    """Test registering a cloud onto itself."""
    response = post(client, '/api/register', {
        'points_p': points,
        'points_q': points,
        'no_overlap_filter': True
    })

    assert response.status_code == 200
    data = json.loads(response.data)
    assert data['success'] is True
    np.testing.assert_allclose(data['transform'], np.hstack([np.eye(3), np.zeros((3, 1))]), atol=1e-6)
    assert data['inliers'] >= 3
    assert 0.0 <= data['tau'] <= 1.0


def test_register_missing_cloud(client, points):
    """Test registration without the second cloud."""
    response = post(client, '/api/register', {'points_p': points})

    assert response.status_code == 400
    data = json.loads(response.data)
    assert 'points_q' in data['error']


def test_register_malformed_point(client, points):
    """Test registration with a point that is not three numbers."""
    response = post(client, '/api/register', {
        'points_p': points,
        'points_q': [[1.0, 2.0], [3.0, 4.0, 5.0]]
    })

    assert response.status_code == 400
    data = json.loads(response.data)
    assert 'Point 0' in data['error']['points_q'][0]


def test_register_empty_cloud(client, points):
    """Test registration with an empty cloud."""
    response = post(client, '/api/register', {'points_p': points, 'points_q': []})

    assert response.status_code == 400
    data = json.loads(response.data)
    assert data['error'] == 'EmptyInputError'


def test_register_bad_max_keypoints(client, points):
    """Test registration with an out-of-range keypoint count."""
    response = post(client, '/api/register', {
        'points_p': points,
        'points_q': points,
        'max_keypoints': -5
    })

    assert response.status_code == 400


def test_similarity(client, points):
    """Test the similarity score of two clouds."""
    response = post(client, '/api/similarity', {'points_p': points, 'points_q': points})

    assert response.status_code == 200
    data = json.loads(response.data)
    assert 0.0 <= data['tau'] <= 1.0


@patch('app.services.pipeline_service.PipelineService.similarity')
def test_similarity_returns_service_score(mock_similarity, client, points):
    """Test that the route returns the service's score."""
    mock_similarity.return_value = 0.42

    response = post(client, '/api/similarity', {'points_p': points, 'points_q': points[:10]})

    assert response.status_code == 200
    assert json.loads(response.data)['tau'] == 0.42
    mock_similarity.assert_called_once()


def test_similarity_requires_json(client):
    """Test the similarity endpoint without a body."""
    response = client.post('/api/similarity')

    assert response.status_code == 400
