"""
Binary container for H²-matrices and factorizations.

Layout (all little-endian):

    header      magic "H2DS", version u16, kind u16, N i64, L i64,
                leafsize i64, eta f64, eps_h2 f64
    ranks       cluster count i64, then one i64 rank per cluster
    manifest    length u64, then UTF-8 JSON: metadata plus, for every array,
                its name, dtype, shape and byte offset into the data section
    data        the arrays back to back

Points are stored in their original order; the cluster tree and the block
partition are rebuilt deterministically on load.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ..errors import InvalidInputError
from ..factorization import EliminationRecord, FactorChain, LevelFactor, PermutationRecord
from ..geometry_tree import PointCloud, build_block_tree, build_cluster_tree
from ..h2_construct import ClusterBasis, CouplingMatrix, H2Matrix
from ..kernels import KernelSpec

# Set up logging
logger = logging.getLogger(__name__)

MAGIC = b"H2DS"
FORMAT_VERSION = 1
KIND_MATRIX = 1
KIND_FACTOR = 2
_HEADER = struct.Struct("<4sHHqqqdd")

PathLike = Union[str, Path]


class _ArrayWriter:
    def __init__(self):
        self.entries: List[Dict[str, Any]] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            dtype = "<c16"
        elif np.issubdtype(arr.dtype, np.integer):
            dtype = "<i8"
        else:
            dtype = "<f8"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        self.entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": self.offset})
        self.chunks.append(data)
        self.offset += len(data)


class _ArrayReader:
    def __init__(self, entries: List[Dict[str, Any]], data: bytes, path: Path):
        self.index = {e["name"]: e for e in entries}
        self.data = data
        self.path = path

    def get(self, name: str) -> np.ndarray:
        entry = self.index.get(name)
        if entry is None:
            raise InvalidInputError(f"{self.path}: array '{name}' missing from container")
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count == 0:
            return np.zeros(entry["shape"], dtype=dtype.newbyteorder("="))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(self.data):
            raise InvalidInputError(f"{self.path}: truncated data for array '{name}'")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=entry["offset"])
        return arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))


def _matrix_arrays(writer: _ArrayWriter, A: H2Matrix) -> Dict[str, Any]:
    writer.add("points", A.tree.points.points)
    for t, b in sorted(A.bases.items()):
        writer.add(f"basis/{t}", b.matrix)
    for (t, s), c in sorted(A.couplings.items()):
        writer.add(f"coupling/{t}/{s}", c.S)
    for (t, s), D in sorted(A.dense_blocks.items()):
        writer.add(f"dense/{t}/{s}", D)

    kernel = None
    if A.kernel is not None and A.kernel.kind != "custom":
        kernel = A.kernel.to_dict()
    return {
        "kernel": kernel,
        "diagonal": A.diagonal,
        "real_bases": A.real_bases,
        "meta": A.meta,
    }


def _chain_arrays(writer: _ArrayWriter, chain: FactorChain) -> Dict[str, Any]:
    for name, array in chain.arrays():
        writer.add(name, array)
    levels = []
    for lf in chain.levels:
        records = []
        for rec in lf.records:
            records.append({
                "cluster": rec.cluster,
                "offset": rec.offset,
                "size": rec.size,
                "eliminated_count": rec.eliminated_count,
                "lower_blocks": [[a, b] for a, b, _ in rec.lower_blocks],
                "upper_blocks": [[a, b] for a, b, _ in rec.upper_blocks],
                "rank_before": rec.rank_before,
                "rank_after": rec.rank_after,
                "fill_in_count": rec.fill_in_count,
            })
        levels.append({"level": lf.level, "n_retained": lf.permutation.n_retained, "records": records})

    return {
        "n": chain.n,
        "stop_level": chain.stop_level,
        "eps_fill_in": chain.eps_fill_in,
        "peak_nbytes": chain.peak_nbytes,
        "diagnostics": chain.diagnostics,
        "levels": levels,
    }


def _write(path: Path, kind: int, A: H2Matrix, manifest: Dict[str, Any], writer: _ArrayWriter) -> Path:
    manifest["arrays"] = writer.entries
    blob = json.dumps(manifest).encode("utf-8")
    ranks = A.rank_table().astype("<i8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, A.n, A.depth, A.tree.leafsize, A.blocks.eta, A.eps_h2)
    path = Path(path)
    with path.open("wb") as f:
        f.write(header)
        f.write(struct.pack("<q", ranks.size))
        f.write(ranks.tobytes())
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for chunk in writer.chunks:
            f.write(chunk)
    logger.info(f"Wrote {path} ({path.stat().st_size / 2**20:.2f} MiB, {len(writer.entries)} arrays)")
    return path


def save_h2(path: PathLike, A: H2Matrix) -> Path:
    """Write an H²-matrix container."""
    writer = _ArrayWriter()
    manifest = {"matrix": _matrix_arrays(writer, A)}
    return _write(Path(path), KIND_MATRIX, A, manifest, writer)


def save_factorization(path: PathLike, A: H2Matrix, chain: FactorChain) -> Path:
    """Write a container holding the H²-matrix together with its factorization."""
    if chain.n != A.n:
        raise InvalidInputError(f"Chain dimension {chain.n} does not match matrix dimension {A.n}")
    writer = _ArrayWriter()
    manifest = {"matrix": _matrix_arrays(writer, A), "chain": _chain_arrays(writer, chain)}
    return _write(Path(path), KIND_FACTOR, A, manifest, writer)


def _read(path: Path) -> Tuple[int, Dict[str, Any], _ArrayReader, Tuple]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 8:
        raise InvalidInputError(f"{path}: file too short for an H2DS container")
    header = _HEADER.unpack_from(raw, 0)
    magic, version, kind = header[:3]
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}, not an H2DS container")
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported container version {version}")

    pos = _HEADER.size
    (count,) = struct.unpack_from("<q", raw, pos)
    pos += 8
    if count < 0 or pos + 8 * count + 8 > len(raw):
        raise InvalidInputError(f"{path}: truncated rank table")
    ranks = np.frombuffer(raw, dtype="<i8", count=count, offset=pos).astype(np.int64)
    pos += 8 * count
    (length,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if pos + length > len(raw):
        raise InvalidInputError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[pos:pos + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"{path}: corrupt manifest ({e})") from e
    pos += length
    reader = _ArrayReader(manifest.get("arrays", []), raw[pos:], path)
    return kind, manifest, reader, (header[3:], ranks)


def _load_matrix(path: Path, manifest: Dict[str, Any], reader: _ArrayReader, header: Tuple) -> H2Matrix:
    (n, depth, leafsize, eta, eps_h2), ranks = header
    info = manifest["matrix"]
    pc = PointCloud(reader.get("points"))
    tree = build_cluster_tree(pc, int(leafsize))
    if pc.n != n or tree.depth != depth:
        raise InvalidInputError(f"{path}: header (N={n}, L={depth}) does not match the stored points")
    blocks = build_block_tree(tree, float(eta))

    bases = {}
    for c in tree.clusters:
        M = reader.get(f"basis/{c.id}")
        if M.shape[1] != ranks[c.id]:
            raise InvalidInputError(f"{path}: rank table disagrees with basis of cluster {c.id}")
        bases[c.id] = ClusterBasis(c.id, M, c.is_leaf)
    couplings = {
        (t, s): CouplingMatrix((t, s), reader.get(f"coupling/{t}/{s}")) for t, s, _ in blocks.admissible
    }
    dense = {(t, s): reader.get(f"dense/{t}/{s}") for t, s in blocks.inadmissible}
    kernel = KernelSpec.from_dict(info["kernel"]) if info.get("kernel") else None
    return H2Matrix(
        tree, blocks, bases, couplings, dense, float(eps_h2), float(info["diagonal"]),
        kernel, bool(info.get("real_bases", True)), dict(info.get("meta", {})),
    )


def _load_chain(manifest: Dict[str, Any], reader: _ArrayReader) -> FactorChain:
    info = manifest["chain"]
    levels = []
    for lv in info["levels"]:
        l = lv["level"]
        records = []
        for r in lv["records"]:
            prefix = f"chain/{l}/{r['cluster']}"
            records.append(EliminationRecord(
                cluster=r["cluster"],
                level=l,
                offset=r["offset"],
                size=r["size"],
                eliminated_count=r["eliminated_count"],
                qtilde=reader.get(f"{prefix}/qtilde"),
                lower=reader.get(f"{prefix}/lower"),
                upper=reader.get(f"{prefix}/upper"),
                lower_blocks=[
                    (a, b, reader.get(f"{prefix}/lower_block/{n}")) for n, (a, b) in enumerate(r["lower_blocks"])
                ],
                upper_blocks=[
                    (a, b, reader.get(f"{prefix}/upper_block/{n}")) for n, (a, b) in enumerate(r["upper_blocks"])
                ],
                rank_before=r["rank_before"],
                rank_after=r["rank_after"],
                fill_in_count=r["fill_in_count"],
            ))
        perm = PermutationRecord(l, reader.get(f"chain/{l}/perm"), lv["n_retained"])
        levels.append(LevelFactor(l, records, perm))
    return FactorChain(
        n=info["n"],
        levels=levels,
        root_perm=reader.get("chain/root_perm"),
        root_lower=reader.get("chain/root_lower"),
        root_upper=reader.get("chain/root_upper"),
        stop_level=info["stop_level"],
        eps_fill_in=info["eps_fill_in"],
        diagnostics=info.get("diagnostics", []),
        peak_nbytes=info.get("peak_nbytes", 0),
    )


def load_h2(path: PathLike) -> H2Matrix:
    """
    Read an H²-matrix from a matrix or factorization container.

    Raises:
        InvalidInputError: Wrong magic, unsupported version, truncated or inconsistent data
        OSError: If the file cannot be read
    """
    path = Path(path)
    kind, manifest, reader, header = _read(path)
    if kind not in (KIND_MATRIX, KIND_FACTOR):
        raise InvalidInputError(f"{path}: unknown container kind {kind}")
    return _load_matrix(path, manifest, reader, header)


def load_factorization(path: PathLike) -> Tuple[H2Matrix, FactorChain]:
    """Read a factorization container; returns the matrix and its chain."""
    path = Path(path)
    kind, manifest, reader, header = _read(path)
    if kind != KIND_FACTOR:
        raise InvalidInputError(f"{path}: container holds no factorization (kind {kind})")
    A = _load_matrix(path, manifest, reader, header)
    return A, _load_chain(manifest, reader)


def container_kind(path: PathLike) -> Optional[str]:
    """'matrix', 'factor' or None for a file that is not an H2DS container."""
    with Path(path).open("rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        return None
    kind = _HEADER.unpack(head)[2]
    return {KIND_MATRIX: "matrix", KIND_FACTOR: "factor"}.get(kind)
