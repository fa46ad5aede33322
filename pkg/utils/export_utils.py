"""
Export utilities for the GP flow toolkit
CSV writers and readers for loss curves, particle trajectories and matchings.
Missing values are written as empty cells and read back as None.
"""

import csv
import math

import numpy as np

from core.otlab import TransportReport

GP_CURVE_COLUMNS = ('epoch', 'ot_cost', 'nll', 'euler_penalty', 'energy', 'lambda')
NF_CURVE_COLUMNS = ('epoch', 'train_nll', 'heldout_nll')


def _cell(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _number(text):
    if text == '':
        return None
    value = float(text)
    return int(value) if value.is_integer() and 'e' not in text and '.' not in text else value


def write_rows(path, columns, rows):
    """Write dict rows with a fixed column order"""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])


def read_rows(path):
    """Read a numeric CSV written by write_rows into a list of dicts"""
    with open(path, newline='') as fh:
        return [{key: _number(value) for key, value in row.items()} for row in csv.DictReader(fh)]


def write_gp_curve(path, curve):
    """
    Write TransportReport rows of a GP fit

    Args:
        path: destination CSV
        curve: list of TransportReport with epoch set
    """
    rows = []
    for report in curve:
        row = report.to_dict()
        row['lambda'] = row.pop('lambda_')
        rows.append(row)
    write_rows(path, GP_CURVE_COLUMNS, rows)


def read_gp_curve(path):
    """Read a GP curve back into TransportReport rows"""
    reports = []
    for row in read_rows(path):
        reports.append(TransportReport(
            ot_cost=row['ot_cost'],
            nll=row['nll'],
            energy=row['energy'],
            epoch=row['epoch'],
            euler_penalty=row['euler_penalty'],
            lambda_=row['lambda'],
        ))
    return reports


def write_nf_curve(path, curve):
    write_rows(path, NF_CURVE_COLUMNS, curve)


def write_trajectories(path, times, states):
    """
    Write particle paths as rows (particle, t, x1..xd)

    Args:
        times: (K,) node times
        states: (K, n, d) positions
    """
    times = np.asarray(times, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    n_nodes, n_particles, dim = states.shape
    columns = ['particle', 't', *[f'x{i + 1}' for i in range(dim)]]
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for p in range(n_particles):
            for k in range(n_nodes):
                writer.writerow([p, repr(float(times[k])), *[repr(float(v)) for v in states[k, p]]])


def read_trajectories(path):
    """
    Read a trajectory CSV

    Returns:
        tuple: (times (K,), states (K, n, d)); empty arrays for a header-only file
    """
    rows = read_rows(path)
    if not rows:
        return np.zeros(0), np.zeros((0, 0, 0))
    dim = len(rows[0]) - 2
    particles = sorted({row['particle'] for row in rows})
    times = sorted({row['t'] for row in rows if row['particle'] == particles[0]})
    states = np.zeros((len(times), len(particles), dim))
    index = {t: k for k, t in enumerate(times)}
    for row in rows:
        states[index[row['t']], row['particle']] = [row[f'x{i + 1}'] for i in range(dim)]
    return np.asarray(times, dtype=np.float64), states


def write_matching(path, source, target, perm, base_images, composed_images=None):
    """
    Write one row per source point: the point, its exact OT partner, and
    its images under the base flow and base + GP
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    dim = source.shape[1]
    columns = ['index', 'match']
    for prefix in ('src', 'tgt', 'base', 'gp'):
        columns += [f'{prefix}{i + 1}' for i in range(dim)]
    rows = []
    for i in range(len(source)):
        row = {'index': i, 'match': int(perm[i])}
        row.update({f'src{k + 1}': float(source[i, k]) for k in range(dim)})
        row.update({f'tgt{k + 1}': float(target[perm[i], k]) for k in range(dim)})
        row.update({f'base{k + 1}': float(base_images[i, k]) for k in range(dim)})
        if composed_images is not None:
            row.update({f'gp{k + 1}': float(composed_images[i, k]) for k in range(dim)})
        rows.append(row)
    write_rows(path, columns, rows)


def read_matching(path):
    """
    Read a matching CSV

    Returns:
        dict of arrays: 'match', 'source', 'target', 'base' and 'gp' (None if absent)
    """
    rows = read_rows(path)
    if not rows:
        return None
    dim = sum(1 for key in rows[0] if key.startswith('src'))

    def block(prefix):
        values = [[row[f'{prefix}{k + 1}'] for k in range(dim)] for row in rows]
        if any(v is None for vals in values for v in vals):
            return None
        return np.asarray(values, dtype=np.float64)

    return {
        'match': np.asarray([row['match'] for row in rows], dtype=np.int64),
        'source': block('src'),
        'target': block('tgt'),
        'base': block('base'),
        'gp': block('gp'),
    }
