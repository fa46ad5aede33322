import json
import os


def make_run(runs_dir, name, report=None):
    run_dir = os.path.join(runs_dir, name)
    os.makedirs(run_dir)
    manifest = {'schema_version': 1, 'seed': 7, 'files': {'nf.ckpt': {}},
                'commands': [{'command': 'train-nf', 'files': ['nf.ckpt']}]}
    with open(os.path.join(run_dir, 'manifest.json'), 'w') as fh:
        json.dump(manifest, fh)
    if report is not None:
        with open(os.path.join(run_dir, 'report.json'), 'w') as fh:
            json.dump(report, fh)
    return run_dir


def test_home_lists_commands(client):
    response = client.get('/')
    assert response.status_code == 200
    commands = response.get_json()['commands']
    for name in ('sample-data', 'train-nf', 'fit-gp', 'eval', 'export-traj', 'plot'):
        assert name in commands


def test_health(client, runs_dir):
    data = client.get('/api/health').get_json()
    assert data['status'] == 'healthy'
    assert data['schema_version'] == 1
    assert data['runs_dir'] == runs_dir


def test_list_runs(client, runs_dir):
    make_run(runs_dir, 'moons')
    os.makedirs(os.path.join(runs_dir, 'scratch'))
    data = client.get('/api/runs').get_json()
    assert data['success'] is True
    assert data['count'] == 1
    assert data['runs'][0] == {'name': 'moons', 'seed': 7, 'commands': ['train-nf'], 'files': ['nf.ckpt']}


def test_report(client, runs_dir):
    make_run(runs_dir, 'moons', report={'base': {'ot_cost': 0.5}, 'composed': None, 'gap_closure': None})
    data = client.get('/api/runs/moons/report').get_json()
    assert data['success'] is True and data['run'] == 'moons'
    assert data['report']['base']['ot_cost'] == 0.5


def test_manifest(client, runs_dir):
    make_run(runs_dir, 'moons')
    data = client.get('/api/runs/moons/manifest').get_json()
    assert data['manifest']['seed'] == 7


def test_missing_report(client, runs_dir):
    make_run(runs_dir, 'moons')
    response = client.get('/api/runs/moons/report')
    assert response.status_code == 404
    assert response.get_json()['success'] is False


def test_hidden_run_name_is_rejected(client):
    response = client.get('/api/runs/.hidden/report')
    assert response.status_code == 400


def test_unknown_endpoint(client):
    response = client.get('/api/nothing')
    assert response.status_code == 404
    assert response.get_json() == {
        'success': False,
        'error': 'Endpoint not found',
        'message': 'The requested endpoint does not exist',
    }


def test_method_not_allowed(client):
    response = client.post('/api/health')
    assert response.status_code == 405
    assert response.get_json()['success'] is False
