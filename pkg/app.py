import io
import logging
import os

import pandas as pd
from flask import Flask, jsonify, request

from data import ColumnSchema, make_fold_plan, table_from_frame
from defaults import ESTIMANDS, SCHEMA_VERSION, STUDY_GAMMA, STUDY_METHODS, STUDY_RUNS
from engine import LdmlConfig, run_effect, run_ldml
from errors import ConfigError, LdmlError
from estimands import moment_by_name, with_treatment_level
from helper import parseIntList, parseNameList, toJsonable
from simlab import run_study, study_report

app = Flask(__name__)
logger = logging.getLogger(__name__)

THREADS = int(os.environ.get('LDML_THREADS', 1))


def failure(exc, status):
    return jsonify({'success': False, 'error': exc.to_dict()}), status


def handle_errors(view):
    """Wraps a view so domain errors become 400 responses and anything else a 500."""
    def wrapped(*args, **kwargs):
        try:
            return view(*args, **kwargs)
        except LdmlError as e:
            logger.warning("%s rejected: %s", request.path, e)
            return failure(e, 400)
        except Exception as e:
            logger.exception("Error in %s", request.path)
            return jsonify({'success': False,
                            'error': {'code': 'internal_error', 'type': type(e).__name__, 'message': str(e)}}), 500
    wrapped.__name__ = view.__name__
    wrapped.__doc__ = view.__doc__
    return wrapped


def read_table(data):
    """Observation table from inline 'rows' (list of objects) or 'csv' text."""
    if data.get('rows') is not None:
        frame = pd.DataFrame(data['rows'])
    elif data.get('csv') is not None:
        frame = pd.read_csv(io.StringIO(data['csv']))
    else:
        raise ConfigError("request needs 'rows' or 'csv'")
    if not data.get('treatment') or not data.get('outcome'):
        raise ConfigError("request needs 'treatment' and 'outcome' column names")
    covariates = parseNameList(data.get('covariates'), what="covariate") or None
    schema = ColumnSchema(treatment=data['treatment'], outcome=data['outcome'],
                          covariates=tuple(covariates) if covariates else None,
                          instrument=data.get('instrument'))
    return table_from_frame(frame, schema)


@app.route('/')
def index():
    """Describe the service"""
    return jsonify({
        'service': 'ldml',
        'schema_version': SCHEMA_VERSION,
        'estimands': ESTIMANDS,
        'endpoints': ['/api/estimate', '/api/fold_plan', '/api/simulate'],
    })


@app.route('/api/estimate', methods=['POST'])
@handle_errors
def estimate():
    """Estimate from inline data; accepts the same keys as the CLI config"""
    data = request.get_json(silent=True) or {}
    table = read_table(data)
    moment = moment_by_name(data.get('estimand', 'quantile'), float(data.get('gamma', 0.5)),
                            int(data.get('treatment_level', 1)))
    moment.check_table(table)
    config = LdmlConfig(
        K=int(data.get('k', 5)),
        Kprime=int(data.get('kprime', 2)),
        variant=data.get('variant', 'ldml2'),
        splits=int(data.get('splits', 3)),
        aggregate=data.get('aggregate', 'median'),
        epsilon_tolerance=float(data.get('epsilon_tolerance', 0.0)),
        learners=data.get('learners') or {},
        seed=int(data.get('seed', 0)),
        stratify=bool(data.get('stratify', True)),
        normalize_weights=bool(data.get('normalize_weights', False)),
        trim=float(data.get('trim', 0.025)),
        bandwidth=data.get('bandwidth'),
        self_normalize=bool(data.get('self_normalize', True)),
        threads=THREADS,
    )
    alpha = float(data.get('alpha', 0.05))

    if data.get('effect'):
        treated, control, report = run_effect(table, with_treatment_level(moment, 1),
                                              with_treatment_level(moment, 0), config)
        for r in (treated, control, report):
            r.alpha = alpha
        arms = {'treated': treated.to_dict(), 'control': control.to_dict()}
    else:
        report = run_ldml(table, moment, config)
        report.alpha = alpha
        arms = None

    body = {'success': True, 'schema_version': SCHEMA_VERSION, 'report': report.to_dict()}
    if arms:
        body['arms'] = arms
    return jsonify(toJsonable(body))


@app.route('/api/fold_plan', methods=['POST'])
@handle_errors
def fold_plan():
    """Return the folds and index sets of a K-fold plan"""
    data = request.get_json(silent=True) or {}
    if 'n' not in data:
        raise ConfigError("request needs 'n'")
    plan = make_fold_plan(int(data['n']), int(data.get('K', 5)), int(data.get('Kprime', 2)),
                          int(data.get('seed', 0)), stratify=data.get('stratify'))
    return jsonify(toJsonable({
        'success': True,
        'K': plan.K,
        'Kprime': plan.Kprime,
        'folds': [plan.fold_rows(k) for k in range(plan.K)],
        'h1': plan.h1,
        'h2': plan.h2,
    }))


@app.route('/api/simulate', methods=['POST'])
@handle_errors
def simulate():
    """Run a (small) simulation study"""
    data = request.get_json(silent=True) or {}
    if data.get('seed') is None:
        raise ConfigError("simulate needs an explicit 'seed'")
    methods = parseNameList(data.get('methods', 'ldml,ipw'), allowed=STUDY_METHODS, what="method")
    n_grid = parseIntList(data.get('n', '400'), what="sample size")
    gamma = float(data.get('gamma', STUDY_GAMMA))
    reports = run_study(methods, n_grid, int(data.get('reps', 5)), gamma=gamma, seed=int(data['seed']),
                        learners=data.get('learners'), threads=THREADS, runs=int(data.get('runs', STUDY_RUNS)))
    return jsonify(toJsonable({'success': True, **study_report(reports, gamma, int(data['seed']))}))


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)
    port = int(os.environ.get('PORT', 8080))
    app.run(debug=False, host='0.0.0.0', port=port)
