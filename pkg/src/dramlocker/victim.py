"""Protected assets: an int8 MLP whose weights live in DRAM rows, and a page table.

Model file layout (little-endian)::

    b"QMDL"  u16 version=1  u8 weight_width (1 = int8, 2 = int16)  u8 pad
    u32 n_layers
    n_layers x { u32 in_dim, u32 out_dim, f64 scale, u8 activation, 3 pad }
    n_layers weight blocks, row-major (in_dim, out_dim), signed weight_width bytes each

Weights must fit int8 whatever the storage width. Dataset files are a flat
sequence of 65-byte records ``{label, 64 pixels}`` with pixel values 0..16.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dram import DramConfig, DramState, RowAddress
from .errors import FormatError, PageFault, PlacementError, RangeError, ResourceExhausted

MODEL_MAGIC = b"QMDL"
ACTIVATIONS = {0: "identity", 1: "relu"}
ACTIVATION_CODES = {v: k for k, v in ACTIVATIONS.items()}
PIXELS = 64
PIXEL_MAX = 16.0
RECORD = 1 + PIXELS


@dataclass
class Layer:
    weights: np.ndarray  # int8, (in_dim, out_dim)
    scale: float
    activation: str = "relu"

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise FormatError(f"layer weights must be 2-D, got shape {w.shape}")
        if w.size and (w.min() < -128 or w.max() > 127):
            raise RangeError(f"weight values [{w.min()}, {w.max()}] outside int8")
        self.weights = w.astype(np.int8)
        if self.activation not in ACTIVATION_CODES:
            raise FormatError(f"unknown activation {self.activation!r}")

    @property
    def real(self) -> np.ndarray:
        return self.weights.astype(np.float64) * self.scale


@dataclass
class QuantizedModel:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise FormatError("model has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise FormatError(f"layer dims do not chain: {a.weights.shape} -> {b.weights.shape}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_classes(self) -> int:
        return self.layers[-1].weights.shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.weights.size for layer in self.layers]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = h @ layer.real
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def weight_bytes(self) -> bytes:
        return b"".join(layer.weights.tobytes(order="C") for layer in self.layers)

    def with_weight_bytes(self, blob: bytes) -> "QuantizedModel":
        if len(blob) != sum(self.layer_sizes):
            raise FormatError(f"expected {sum(self.layer_sizes)} weight bytes, got {len(blob)}")
        flat = np.frombuffer(blob, dtype=np.int8)
        layers, pos = [], 0
        for layer in self.layers:
            n = layer.weights.size
            w = flat[pos:pos + n].reshape(layer.weights.shape).copy()
            layers.append(Layer(w, layer.scale, layer.activation))
            pos += n
        return QuantizedModel(layers)

    def copy(self) -> "QuantizedModel":
        return QuantizedModel([Layer(l.weights.copy(), l.scale, l.activation) for l in self.layers])

    def digest(self) -> str:
        return hashlib.sha256(self.weight_bytes()).hexdigest()


def save_model(model: QuantizedModel, path, weight_width: int = 1) -> None:
    dtype = {1: "<i1", 2: "<i2"}[weight_width]
    out = [MODEL_MAGIC, struct.pack("<HBBI", 1, weight_width, 0, len(model.layers))]
    for layer in model.layers:
        i, o = layer.weights.shape
        out.append(struct.pack("<IIdB3x", i, o, float(layer.scale),
                               ACTIVATION_CODES[layer.activation]))
    for layer in model.layers:
        out.append(layer.weights.astype(dtype).tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def parse_model(blob: bytes) -> QuantizedModel:
    if blob[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    try:
        version, width, _pad, n_layers = struct.unpack_from("<HBBI", blob, 4)
    except struct.error:
        raise FormatError("truncated model header") from None
    if version != 1:
        raise FormatError(f"unsupported model version {version}")
    if width not in (1, 2):
        raise FormatError(f"unsupported weight width {width}")
    if n_layers == 0:
        raise FormatError("model has no layers")
    pos = 12
    headers = []
    for _ in range(n_layers):
        try:
            i, o, scale, act = struct.unpack_from("<IIdB3x", blob, pos)
        except struct.error:
            raise FormatError("truncated layer header") from None
        if act not in ACTIVATIONS:
            raise FormatError(f"unknown activation code {act}")
        if not np.isfinite(scale) or scale <= 0:
            raise FormatError(f"layer scale must be positive and finite, got {scale}")
        headers.append((i, o, scale, ACTIVATIONS[act]))
        pos += 20
    dtype = {1: "<i1", 2: "<i2"}[width]
    layers = []
    for i, o, scale, act in headers:
        n = i * o * width
        if pos + n > len(blob):
            raise FormatError("truncated weight block")
        w = np.frombuffer(blob, dtype=dtype, count=i * o, offset=pos).reshape(i, o)
        if w.size and (w.min() < -128 or w.max() > 127):
            raise RangeError(f"weight values [{w.min()}, {w.max()}] outside int8")
        layers.append(Layer(w.astype(np.int8), scale, act))
        pos += n
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after weight blocks")
    return QuantizedModel(layers)


def load_model(path=None) -> QuantizedModel:
    """Load a model file; ``None`` loads the bundled fixture."""
    if path is None:
        return parse_model(resources.files("dramlocker.data").joinpath("model.bin").read_bytes())
    return parse_model(Path(path).read_bytes())


# -- datasets -------------------------------------------------------------------------

@dataclass
class Dataset:
    labels: np.ndarray  # uint8 (N,)
    pixels: np.ndarray  # uint8 (N, 64)

    def __len__(self):
        return len(self.labels)

    @property
    def features(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / PIXEL_MAX

    def subset(self, idx) -> "Dataset":
        return Dataset(self.labels[idx], self.pixels[idx])

    def sample(self, size: int, seed: int = 0) -> "Dataset":
        if size > len(self):
            raise ValueError(f"sample of {size} from dataset of {len(self)}")
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=size, replace=False)))

    def to_bytes(self) -> bytes:
        return np.concatenate([self.labels[:, None], self.pixels], axis=1).astype(np.uint8).tobytes()


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) % RECORD:
        raise FormatError(f"dataset length {len(blob)} is not a multiple of {RECORD}")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD)
    return Dataset(arr[:, 0].copy(), arr[:, 1:].copy())


def load_dataset(path=None, split: str = "test") -> Dataset:
    if path is None:
        name = f"digits_{split}.bin"
        return parse_dataset(resources.files("dramlocker.data").joinpath(name).read_bytes())
    return parse_dataset(Path(path).read_bytes())


def read_manifest(path=None) -> dict:
    if path is None:
        text = resources.files("dramlocker.data").joinpath("manifest.txt").read_text()
    else:
        text = Path(path).read_text()
    out = {}
    for line in text.splitlines():
        if ":" in line and not line.lstrip().startswith("#"):
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def evaluate(model: QuantizedModel, dataset: Dataset, sample_size: int | None = 128,
             seed: int = 0) -> float:
    """Top-1 accuracy on a seeded sample (``None`` = the whole dataset)."""
    data = dataset if sample_size is None else dataset.sample(sample_size, seed)
    if len(data) == 0:
        return 0.0
    return float(np.mean(model.predict(data.features) == data.labels))


# -- weight placement -------------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    layer: int
    start: int  # first weight index (flattened, row-major) held in the row
    stop: int
    row: RowAddress
    offset: int  # byte offset of ``start`` within the row


@dataclass
class WeightMap:
    """All layers flattened into one byte stream, chunked into rows in order."""

    rows: list  # data row k holds stream bytes [k * bytes_per_row, (k+1) * bytes_per_row)
    bytes_per_row: int
    layer_sizes: list
    _row_index: dict = field(default_factory=dict, repr=False)
    _layer_offsets: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._row_index = {r: k for k, r in enumerate(self.rows)}
        if len(self._row_index) != len(self.rows):
            raise PlacementError("weight rows must be distinct")
        self._layer_offsets = list(np.cumsum([0] + list(self.layer_sizes))[:-1])
        need = -(-sum(self.layer_sizes) // self.bytes_per_row)
        if need != len(self.rows):
            raise PlacementError(f"{sum(self.layer_sizes)} bytes need {need} rows, got {len(self.rows)}")

    @property
    def total_bytes(self) -> int:
        return int(sum(self.layer_sizes))

    @property
    def placements(self) -> list[Placement]:
        out = []
        for layer, (base, size) in enumerate(zip(self._layer_offsets, self.layer_sizes)):
            g = base
            while g < base + size:
                k, off = divmod(g, self.bytes_per_row)
                end = min(base + size, (k + 1) * self.bytes_per_row)
                out.append(Placement(layer, int(g - base), int(end - base), self.rows[k], int(off)))
                g = end
        return out

    def locate(self, layer: int, index: int, bit: int) -> tuple[RowAddress, int]:
        if not 0 <= layer < len(self.layer_sizes) or not 0 <= index < self.layer_sizes[layer]:
            raise IndexError(f"weight ({layer}, {index}) not in model")
        if not 0 <= bit < 8:
            raise IndexError(f"bit {bit} outside int8")
        k, off = divmod(int(self._layer_offsets[layer]) + index, self.bytes_per_row)
        return self.rows[k], off * 8 + bit

    def inverse(self, row: RowAddress, bit_offset: int) -> tuple[int, int, int]:
        k = self._row_index.get(row)
        if k is None:
            raise KeyError(f"row {row} holds no weights")
        g = k * self.bytes_per_row + bit_offset // 8
        if not 0 <= bit_offset < self.bytes_per_row * 8 or g >= self.total_bytes:
            raise KeyError(f"bit {bit_offset} of row {row} holds no weight")
        layer = int(np.searchsorted(self._layer_offsets, g, side="right") - 1)
        return layer, int(g - self._layer_offsets[layer]), bit_offset % 8


def map_weights_to_rows(model: QuantizedModel, config: DramConfig, policy: str = "scatter",
                        seed: int = 0, reservation=None) -> WeightMap:
    """Place the model's weight bytes on DRAM rows.

    ``scatter`` draws a subarray uniformly per data row (so some subarrays get
    several rows and some none), then a random row inside it; no two weight rows
    are adjacent, which keeps lock-table neighbours off the weights themselves.
    ``sequential`` fills rows in address order.
    """
    total = sum(model.layer_sizes)
    n_rows = -(-total // config.row_size)

    def usable(addr):
        return reservation is None or not reservation.is_reserved(addr)

    if policy == "sequential":
        rows = []
        for b, s in config.subarrays():
            for r in range(config.rows_per_subarray):
                if len(rows) == n_rows:
                    break
                if usable(RowAddress(b, s, r)):
                    rows.append(RowAddress(b, s, r))
        if len(rows) < n_rows:
            raise PlacementError(f"{n_rows} weight rows needed, only {len(rows)} available")
        return WeightMap(rows, config.row_size, model.layer_sizes)
    if policy != "scatter":
        raise ValueError(f"unknown placement policy {policy!r}")

    per_sub = sum(1 for r in range(config.rows_per_subarray)
                  if usable(RowAddress(0, 0, r)))
    capacity = (per_sub + 1) // 2 * config.banks * config.subarrays_per_bank
    if n_rows > capacity:
        raise PlacementError(f"{n_rows} non-adjacent weight rows needed, capacity {capacity}")
    rng = np.random.default_rng(seed)
    n_sub = config.banks * config.subarrays_per_bank
    taken: set = set()
    full: set = set()
    rows = []
    while len(rows) < n_rows:
        if len(full) == n_sub:
            raise PlacementError(f"scatter ran out of rows after placing {len(rows)} of {n_rows}")
        b, s = divmod(int(rng.integers(n_sub)), config.subarrays_per_bank)
        free = [RowAddress(b, s, r) for r in range(config.rows_per_subarray)
                if usable(RowAddress(b, s, r)) and RowAddress(b, s, r) not in taken
                and all(n not in taken for n in config.neighbors(RowAddress(b, s, r)))]
        if not free:
            full.add((b, s))
            continue
        addr = free[int(rng.integers(len(free)))]
        taken.add(addr)
        rows.append(addr)
    return WeightMap(rows, config.row_size, model.layer_sizes)


def write_model_to_dram(model: QuantizedModel, wmap: WeightMap, dram: DramState) -> None:
    blob = model.weight_bytes()
    rs = wmap.bytes_per_row
    for k, row in enumerate(wmap.rows):
        dram.poke(row, 0, blob[k * rs:(k + 1) * rs])


def sync_model_from_dram(model: QuantizedModel, wmap: WeightMap, dram: DramState) -> QuantizedModel:
    rs = wmap.bytes_per_row
    blob = b"".join(dram.peek(row) for row in wmap.rows)[:wmap.total_bytes]
    assert len(blob) == wmap.total_bytes and rs == dram.config.row_size
    return model.with_weight_bytes(blob)


# -- page table -----------------------------------------------------------------------

PTE_BYTES = 4
FRAME_BITS = 22
FRAME_MASK = (1 << FRAME_BITS) - 1
VALID_BIT = 31


def encode_pte(frame: int, valid: bool = True) -> int:
    if not 0 <= frame <= FRAME_MASK:
        raise ValueError(f"frame {frame} does not fit {FRAME_BITS} bits")
    return (int(valid) << VALID_BIT) | frame


def decode_pte(word: int) -> tuple[int, bool]:
    return word & FRAME_MASK, bool(word >> VALID_BIT & 1)


@dataclass(frozen=True)
class PTE:
    vpn: int
    frame: int
    valid: bool


class PageTable:
    """32-bit PTEs ``{valid:1 @31, reserved:9, frame:22 @0}`` stored back to back in
    ``pte_rows``; entry ``vpn`` lives at byte ``4 * vpn`` of the concatenation.

    Nothing is cached: every lookup decodes the DRAM bytes, which are authoritative.
    A virtual page is one DRAM row, so ``vaddr // row_size`` is the vpn.
    """

    def __init__(self, dram: DramState, pte_rows, n_entries: int | None = None):
        self.dram = dram
        self.pte_rows = list(pte_rows)
        per_row = dram.config.row_size // PTE_BYTES
        cap = per_row * len(self.pte_rows)
        self.n_entries = cap if n_entries is None else n_entries
        if self.n_entries > cap:
            raise ValueError(f"{self.n_entries} PTEs do not fit {len(self.pte_rows)} rows")
        if dram.config.address_bits > FRAME_BITS:
            raise ValueError("geometry has more rows than the frame field can address")

    @property
    def page_size(self) -> int:
        return self.dram.config.row_size

    def location(self, vpn: int) -> tuple[RowAddress, int]:
        if not 0 <= vpn < self.n_entries:
            raise PageFault(f"vpn {vpn} outside page table of {self.n_entries} entries")
        k, off = divmod(vpn * PTE_BYTES, self.dram.config.row_size)
        return self.pte_rows[k], off

    def bit_location(self, vpn: int, bit: int) -> tuple[RowAddress, int]:
        row, off = self.location(vpn)
        return row, off * 8 + bit

    def _word(self, vpn: int) -> int:
        row, off = self.location(vpn)
        return struct.unpack_from("<I", self.dram.peek(row), off)[0]

    def map(self, vpn: int, frame: RowAddress, valid: bool = True) -> None:
        row, off = self.location(vpn)
        word = encode_pte(self.dram.config.flat(frame), valid)
        self.dram.poke(row, off, struct.pack("<I", word))

    def unmap(self, vpn: int) -> None:
        row, off = self.location(vpn)
        self.dram.poke(row, off, b"\0" * PTE_BYTES)

    def entry(self, vpn: int) -> PTE:
        frame, valid = decode_pte(self._word(vpn))
        return PTE(vpn, frame, valid)

    @property
    def entries(self) -> list[PTE]:
        return [self.entry(v) for v in range(self.n_entries)]

    def raw_bytes(self) -> bytes:
        return b"".join(self.dram.peek(r) for r in self.pte_rows)


def translate(pt: PageTable, vaddr: int) -> RowAddress:
    vpn = vaddr // pt.page_size
    pte = pt.entry(vpn)
    if not pte.valid:
        raise PageFault(f"vpn {vpn} has no valid mapping")
    if pte.frame >= pt.dram.config.total_rows:
        raise PageFault(f"vpn {vpn} maps to frame {pte.frame} beyond physical memory")
    return pt.dram.config.unflat(pte.frame)


# -- legitimate runtime ---------------------------------------------------------------

def emit_unlock_requests(plan, controller) -> list:
    """Lower a legitimate access plan into a trusted instruction stream.

    Each ``(row, "read" | "write"[, payload])`` targeting a LOCKED row is
    preceded by the three-copy SWAP and redirected to the free row that will
    hold the data; SWAPPED rows are redirected to their current home.
    The stream is meant to run right away, before any re-lock fires.
    """
    from .locker import LOCKED, MemOp, swap_copies

    table = controller.table
    planned: dict = {}
    claimed: set = set()
    stream = []
    for item in plan:
        row, kind = item[0], item[1]
        payload = item[2] if len(item) > 2 else None
        op = {"read": "rd", "write": "wr", "rd": "rd", "wr": "wr"}[kind]
        entry = table.entries.get(row)
        target = row
        if row in planned:
            target = planned[row]
        elif entry is not None and entry.state == LOCKED:
            free = controller.pick_free(row, exclude=claimed)
            if free is None:
                raise ResourceExhausted(f"no free row left in subarray of {row}")
            claimed.add(free)
            buffer = controller.reservation.buffer_row(row)
            stream.extend(swap_copies(row, free, buffer))
            planned[row] = target = free
        elif entry is not None:
            target = entry.current_home
        stream.append(MemOp(op, target, trusted=True, payload=payload))
    return stream
