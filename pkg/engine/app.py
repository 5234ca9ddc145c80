import logging

import numpy as np
from dotenv import load_dotenv
from flask import Flask, request, jsonify
from flask_cors import CORS
from pydantic import ValidationError

from config import ConfigError, configure_logging, format_validation_error, get_api_config, load_presets

# --- 1. SETUP AND CONFIGURATION ---

load_dotenv()
configure_logging()
logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app, origins=get_api_config()['cors_origins'])


# --- 2. GLOBAL STATE & INITIALIZATION ---
# Called by run_server.py

presets = None


def initialize_presets(path=None):
    """Loads the preset catalog that the endpoints resolve names against."""
    global presets
    try:
        logger.info("Loading preset catalog...")
        presets = load_presets(path)
        logger.info(f"✅ {len(presets['media'])} media, {len(presets['transducers'])} transducers, "
                    f"{len(presets['domain_fractions'])} fraction tables")
        return True
    except ConfigError as e:
        logger.error(f"Failed to load presets: {e}")
        return False


def _payload():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ConfigError('Invalid JSON payload')
    return data


def _run_config(data):
    from cli import RunConfig
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(format_validation_error('request', e))


def _profile_json(profile):
    return {
        'harmonic': profile.harmonic_index,
        'x_m': profile.x.tolist(),
        're_Pa': profile.values.real.tolist(),
        'im_Pa': profile.values.imag.tolist(),
        'abs_Pa': np.abs(profile.values).tolist(),
    }


# --- 3. API ENDPOINTS ---

@app.route('/health', methods=['GET'])
def health_check():
    return jsonify({'server_status': 'healthy', 'presets_ready': presets is not None})


@app.route('/presets', methods=['GET'])
def list_presets():
    """Names of the built-in media, transducers and domain-fraction tables."""
    if presets is None:
        return jsonify({'error': 'Preset catalog not loaded.'}), 503
    return jsonify({section: [e['name'] for e in presets[section]]
                    for section in ('media', 'transducers', 'domain_fractions')})


@app.route('/wavenumber', methods=['GET'])
def wavenumber():
    """
    GET /wavenumber?medium=liver&f0=1.1e6&harmonic=3

    Returns the complex wavenumber and wavelength of one harmonic.
    """
    from medium import complex_wavenumber, resolve_medium

    try:
        f0 = float(request.args.get('f0', ''))
        harmonic = int(request.args.get('harmonic', 1))
    except ValueError:
        return jsonify({'error': 'Query parameters "f0" (Hz) and "harmonic" must be numbers.'}), 400

    medium = resolve_medium(request.args.get('medium', 'water'))
    k = complex_wavenumber(medium, f0, harmonic)
    return jsonify({'medium': medium.name, 'f0': f0, 'harmonic': harmonic,
                    'k_re': k.k.real, 'k_im': k.k.imag, 'wavelength_m': k.wavelength})


@app.route('/plan', methods=['POST'])
def mesh_plan():
    """Nested mesh plan with per-harmonic dims, memory and reduction factors."""
    from cli import resolve_inputs
    from grid import plan_nested_meshes

    config = _run_config(_payload())
    if config.harmonics < 2:
        return jsonify({'error': 'A mesh plan needs at least 2 harmonics.'}), 400
    transducer, medium, _ = resolve_inputs(config)
    plan = plan_nested_meshes(transducer, medium, config.d, config.n_w, config.harmonics, config.fractions)
    return jsonify(plan.to_dict())


@app.route('/axis', methods=['POST'])
def incident_axis():
    """
    POST /axis - first harmonic on the axis, normalised to the requested power.

    Body: RunConfig fields plus x_min, x_max (m) and n_points_axis.
    """
    from analysis import OnAxisProfile
    from cli import resolve_inputs
    from transducer import IncidentField

    data = _payload()
    try:
        x_min, x_max = float(data.pop('x_min')), float(data.pop('x_max'))
        n = int(data.pop('n_points_axis', 256))
    except (KeyError, TypeError, ValueError):
        return jsonify({'error': 'Fields "x_min" < "x_max" are required.'}), 400
    if x_max <= x_min:
        return jsonify({'error': 'Fields "x_min" < "x_max" are required.'}), 400
    if not 1 <= n <= get_api_config()['max_axis_points']:
        return jsonify({'error': f"n_points_axis must be in [1, {get_api_config()['max_axis_points']}]"}), 400

    transducer, medium, _ = resolve_inputs(_run_config(data))
    x = np.linspace(x_min, x_max, n)
    incident = IncidentField(transducer, medium)
    profile = OnAxisProfile(x, incident.on_axis(x), 1)
    return jsonify({**_profile_json(profile), 'normalization': incident.normalization})


@app.route('/simulate', methods=['POST'])
def simulate():
    """Runs a small cascade synchronously and returns the on-axis profile of every harmonic."""
    from analysis import on_axis_profile
    from cascade import CascadeConfig, run_cascade
    from cli import resolve_inputs, validate_run_config
    from grid import plan_nested_meshes

    config = _run_config(_payload())
    if config.mode != 'homogeneous' or config.harmonics < 2:
        return jsonify({'error': 'The API runs homogeneous cascades with at least 2 harmonics.'}), 400
    validate_run_config(config)
    transducer, medium, _ = resolve_inputs(config)
    plan = plan_nested_meshes(transducer, medium, config.d, config.n_w, config.harmonics, config.fractions)

    total = sum(level.grid.n_voxels for level in plan.levels)
    limit = get_api_config()['max_voxels']
    if total > limit:
        return jsonify({'error': f'Plan has {total} voxels; the API limit is {limit}. Use the CLI.'}), 400

    result = run_cascade(CascadeConfig(medium, transducer, plan, config.harmonics,
                                       record_fields=False, threads=config.threads))
    return jsonify({
        'plan': plan.to_dict(),
        'peak_pressure': result.peak_pressure,
        'timings': result.timing_frame().to_dict(orient='records'),
        'profiles': [_profile_json(on_axis_profile(f)) for f in result.fields],
    })


# --- 4. ERROR HANDLERS ---

@app.errorhandler(ConfigError)
def config_error(error):
    return jsonify({'error': 'Invalid configuration', 'message': str(error)}), 400


@app.errorhandler(ValueError)
def value_error(error):
    logger.warning(f"Rejected request: {error}")
    return jsonify({'error': 'Invalid parameters', 'message': str(error)}), 400


@app.errorhandler(404)
def not_found(error):
    """Handle 404 errors with a list of available endpoints."""
    available_endpoints = [rule.rule for rule in app.url_map.iter_rules() if 'static' not in rule.endpoint]
    return jsonify({
        'error': 'Endpoint not found',
        'available_endpoints': sorted(set(available_endpoints))
    }), 404


@app.errorhandler(500)
def internal_error(error):
    logger.error(f"Internal Server Error: {error}", exc_info=True)
    return jsonify({'error': 'Internal server error', 'message': 'An unexpected error occurred.'}), 500
