"""
Tests for the REST API, through Flask's test client.
"""
import pytest

import app as api


@pytest.fixture
def client():
    assert api.initialize_presets()
    api.app.config['TESTING'] = True
    with api.app.test_client() as client:
        yield client


SMALL = {'f0': 0.25e6, 'n_w': 3, 'harmonics': 3, 'n_points': 256, 'power': 10.0}


def test_health_check(client):
    response = client.get('/health')
    assert response.status_code == 200
    assert response.get_json() == {'server_status': 'healthy', 'presets_ready': True}


def test_presets(client):
    data = client.get('/presets').get_json()
    assert {'water', 'liver', 'kidney'} <= set(data['media'])
    assert {'H101', 'H131'} <= set(data['transducers'])
    assert 'h131-water-100w' in data['domain_fractions']


def test_presets_before_initialization(client, monkeypatch):
    monkeypatch.setattr(api, 'presets', None)
    assert client.get('/presets').status_code == 503


def test_wavenumber(client):
    response = client.get('/wavenumber?medium=water&f0=1e6&harmonic=2')
    assert response.status_code == 200
    data = response.get_json()
    assert data['wavelength_m'] == pytest.approx(1480.0 / 2e6)
    assert data['k_im'] > 0


@pytest.mark.parametrize('query', ['medium=water', 'medium=water&f0=-1e6', 'medium=mercury&f0=1e6',
                                   'f0=1e6&harmonic=two'])
def test_wavenumber_rejects_bad_queries(client, query):
    response = client.get(f'/wavenumber?{query}')
    assert response.status_code == 400
    assert 'error' in response.get_json()


def test_plan(client):
    response = client.post('/plan', json={'transducer': 'H131', 'medium': 'water', 'harmonics': 5})
    assert response.status_code == 200
    levels = response.get_json()['levels']
    assert [lv['harmonic_index'] for lv in levels] == [2, 3, 4, 5]
    assert levels[0]['dims'] == [366, 295, 295]


@pytest.mark.parametrize('payload', [{'transducer': 'H999'}, {'harmonics': 1}, {'powr': 3}])
def test_plan_rejects_bad_payloads(client, payload):
    assert client.post('/plan', json=payload).status_code == 400


def test_non_json_body(client):
    response = client.post('/plan', data='not json', content_type='text/plain')
    assert response.status_code == 400


def test_axis(client):
    response = client.post('/axis', json={'x_min': 0.02, 'x_max': 0.04, 'n_points_axis': 16, 'n_points': 64})
    assert response.status_code == 200
    data = response.get_json()
    assert len(data['x_m']) == len(data['abs_Pa']) == 16
    assert data['normalization'] > 0
    assert data['harmonic'] == 1


@pytest.mark.parametrize('payload', [{'x_max': 0.04}, {'x_min': 0.04, 'x_max': 0.02},
                                     {'x_min': 0.02, 'x_max': 0.04, 'n_points_axis': 0}])
def test_axis_rejects_bad_ranges(client, payload):
    assert client.post('/axis', json=payload).status_code == 400


def test_simulate_small_run(client):
    response = client.post('/simulate', json=SMALL)
    assert response.status_code == 200
    data = response.get_json()
    assert [p['harmonic'] for p in data['profiles']] == [1, 2, 3]
    assert data['peak_pressure'] > 0
    assert [t['harmonic'] for t in data['timings']] == [2, 3]


def test_simulate_refuses_large_plans(client):
    response = client.post('/simulate', json={'harmonics': 5})
    assert response.status_code == 400
    assert 'limit' in response.get_json()['error']


def test_simulate_refuses_vie(client):
    payload = {**SMALL, 'mode': 'vie', 'slab': {'centre_x': 0.02, 'thickness': 4e-3}}
    assert client.post('/simulate', json=payload).status_code == 400


def test_unknown_endpoint_lists_the_api(client):
    response = client.get('/nowhere')
    assert response.status_code == 404
    assert {'/health', '/plan', '/simulate'} <= set(response.get_json()['available_endpoints'])


# --- Server runner ---

def test_server_setup_checks(tmp_path, monkeypatch):
    import config
    import run_server

    monkeypatch.setitem(config.DATA_CONFIG, 'output_dir', str(tmp_path / 'runs'))
    assert run_server.check_dependencies()
    assert run_server.validate_presets()
    run_server.setup_directories()
    assert (tmp_path / 'runs').is_dir()


def test_start_server_uses_host_and_port(monkeypatch):
    import run_server

    calls = {}
    monkeypatch.setattr(api.app, 'run', lambda **kwargs: calls.update(kwargs))
    monkeypatch.setenv('PORT', '5123')
    monkeypatch.setenv('HOST', '127.0.0.1')
    monkeypatch.delenv('DEBUG', raising=False)
    assert run_server.start_server()
    assert (calls['host'], calls['port'], calls['debug']) == ('127.0.0.1', 5123, False)
