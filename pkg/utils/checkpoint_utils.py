"""
Checkpoint utilities for the GP flow toolkit
Binary checkpoints are a magic string, a little-endian uint32 header length,
a UTF-8 JSON header and a little-endian float64 payload. Also handles
git-style content hashes and the per-run manifest.
"""

import hashlib
import json
import logging
import os
import struct
from datetime import datetime, timezone

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from config import DTYPE, SCHEMA_VERSION
from core.baseflow import build_from_header
from core.divfree import VelocityField
from core.errors import DimensionMismatchError
from core.flowode import OdeMap
from core.gaussmap import GpFlow

logger = logging.getLogger(__name__)

MAGIC = b'GPFLOWCK'
HEADER_LENGTH = struct.Struct('<I')
PAYLOAD_DTYPE = np.dtype('<f8')

MANIFEST_NAME = 'manifest.json'


def save_checkpoint(path, header, values):
    """
    Write a checkpoint file

    Args:
        path: destination file
        header: JSON-serializable dict; 'param_count' is filled in
        values: 1-D tensor or array of parameters

    Returns:
        str: git-style sha1 of the written file
    """
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    payload = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(-1)).astype(PAYLOAD_DTYPE)
    header = {**header, 'param_count': int(payload.size), 'schema_version': SCHEMA_VERSION}
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')

    with open(path, 'wb') as fh:
        fh.write(MAGIC)
        fh.write(HEADER_LENGTH.pack(len(encoded)))
        fh.write(encoded)
        fh.write(payload.tobytes())

    digest = content_hash(path)
    logger.info("Checkpoint written: %s (%d parameters, sha1 %s)", path, payload.size, digest)
    return digest


def load_checkpoint(path):
    """
    Read a checkpoint file

    Returns:
        tuple: (header dict, float64 numpy array)

    Raises:
        ValueError: bad magic, truncated file or payload size mismatch
    """
    with open(path, 'rb') as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    offset = len(MAGIC)
    if len(blob) < offset + HEADER_LENGTH.size:
        raise ValueError(f"{path} is truncated")
    (length,) = HEADER_LENGTH.unpack_from(blob, offset)
    offset += HEADER_LENGTH.size
    header = json.loads(blob[offset:offset + length].decode('utf-8'))
    payload = np.frombuffer(blob[offset + length:], dtype=PAYLOAD_DTYPE).astype(np.float64)
    if payload.size != header.get('param_count'):
        raise ValueError(f"{path}: payload has {payload.size} values, header says {header.get('param_count')}")
    return header, payload


def content_hash(path):
    """sha1 of 'blob <size>\\0' + content, as git hashes a file"""
    with open(path, 'rb') as fh:
        content = fh.read()
    sha = hashlib.sha1()
    sha.update(b'blob %d\0' % len(content))
    sha.update(content)
    return sha.hexdigest()


# Base flows

def save_base_flow(path, flow):
    params = list(flow.parameters())
    values = parameters_to_vector(params) if params else torch.zeros(0, dtype=DTYPE)
    return save_checkpoint(path, {'type': 'base_flow', **flow.header()}, values)


def load_base_flow(path):
    header, values = load_checkpoint(path)
    if header.get('type') != 'base_flow':
        raise ValueError(f"{path} holds a '{header.get('type')}' checkpoint, expected a base flow")
    flow = build_from_header(header)
    params = list(flow.parameters())
    expected = sum(p.numel() for p in params)
    if expected != values.size:
        raise ValueError(f"{path}: {values.size} parameters stored, architecture has {expected}")
    if params:
        with torch.no_grad():
            vector_to_parameters(torch.as_tensor(values, dtype=DTYPE), params)
    return flow


# GP flows

def gp_header(gp, **extra):
    field = gp.phi.field
    return {
        'type': 'gp_flow',
        **field.header(),
        'n_steps': gp.phi.n_steps,
        't_final': gp.phi.t_final,
        'orientation': gp.orientation,
        **extra,
    }


def save_gp_flow(path, gp, values=None, **extra):
    """Write a GP flow; values overrides the field's current parameters"""
    if values is None:
        values = parameters_to_vector(gp.phi.field.parameters())
    return save_checkpoint(path, gp_header(gp, **extra), values)


def load_gp_flow(path):
    header, values = load_checkpoint(path)
    if header.get('type') != 'gp_flow':
        raise ValueError(f"{path} holds a '{header.get('type')}' checkpoint, expected a GP flow")
    field = VelocityField(header['dim'], tuple(header['hidden']), header['boundary'])
    params = list(field.parameters())
    expected = sum(p.numel() for p in params)
    if expected != values.size:
        raise ValueError(f"{path}: {values.size} parameters stored, architecture has {expected}")
    with torch.no_grad():
        vector_to_parameters(torch.as_tensor(values, dtype=DTYPE), params)
    phi = OdeMap(field, n_steps=int(header['n_steps']), t_final=float(header['t_final']))
    return GpFlow(phi, int(header['dim']), int(header.get('orientation', 1)))


def check_dimensions(base, gp):
    """Raise DimensionMismatchError when a base flow and a GP flow disagree on d"""
    if gp is not None and base.dim != gp.dim:
        raise DimensionMismatchError(f"Base flow has d={base.dim} but the GP flow has d={gp.dim}")


# Manifest

def update_manifest(run_dir, command, seed, files):
    """
    Record a command and the content hashes of the files it wrote

    Args:
        run_dir: run directory
        command: CLI command name
        seed: run seed
        files: names (relative to run_dir) of files written by the command

    Returns:
        dict: the updated manifest
    """
    path = os.path.join(run_dir, MANIFEST_NAME)
    manifest = {'schema_version': SCHEMA_VERSION, 'commands': [], 'files': {}}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)

    manifest['seed'] = seed
    manifest['commands'].append({
        'command': command,
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'files': sorted(files),
    })
    for name in files:
        target = os.path.join(run_dir, name)
        if os.path.exists(target):
            manifest['files'][name] = {'sha1': content_hash(target), 'bytes': os.path.getsize(target)}

    with open(path, 'w') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write('\n')
    return manifest
