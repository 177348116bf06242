import io
import os

import pandas as pd
import zstandard
from loguru import logger

from bstc.constant import DataError
from bstc.sampler import ChainOutput

GROUPS = ("s", "beta", "xi", "w", "scalars", "loglik")
SCALARS = ("sigma2", "tau2", "rho", "alpha", "k")
FLOAT_FORMAT = "%.17g"


def _write_table(df: pd.DataFrame, path: str, level: int):
    text = df.to_csv(index=False, float_format=FLOAT_FORMAT)
    if level > 0:
        # zstd frame carries the content size
        with open(path + ".zst", "wb") as f:
            f.write(zstandard.compress(text.encode("utf-8"), level=level))
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)


def _read_table(path: str) -> pd.DataFrame:
    if os.path.isfile(path + ".zst"):
        with open(path + ".zst", "rb") as f:
            text = zstandard.decompress(f.read()).decode("utf-8")
        return pd.read_csv(io.StringIO(text), float_precision="round_trip")
    if os.path.isfile(path):
        return pd.read_csv(path, float_precision="round_trip")
    raise DataError("File does not exist", {"File": path})


def write_meta(path: str, items: dict):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in items.items():
            f.write(f"{key} = {value}\n")


def read_meta(path: str) -> dict:
    if not os.path.isfile(path):
        raise DataError("File does not exist", {"File": path})
    items = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if " = " not in line:
                raise DataError("Expected `key = value`", {"File": path, "Line": n})
            key, value = line.split(" = ", 1)
            items[key.strip()] = value.strip()
    return items


def _parse_label(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_chain(output: ChainOutput, path: str, level: int = 0):
    """Write a ChainOutput as a directory of CSV groups plus a `meta` file.

    A positive `level` writes zstd-compressed `<group>.csv.zst` files.
    """
    os.makedirs(path, exist_ok=True)
    ids = [str(u) for u in output.unit_ids]
    I, T, dim = output.n_units, len(output.times), output.p + 1

    meta = dict(output.config)
    meta.update(
        {
            "unit_ids": ",".join(ids),
            "times": ",".join(str(t) for t in output.times),
            "p": str(output.p),
            "draws": str(output.n_draws),
        }
    )
    for key, rate in output.acceptance.items():
        meta[f"acceptance_{key}"] = repr(float(rate))
    for key, value in output.extra.items():
        meta[key] = str(value)
    write_meta(os.path.join(path, "meta"), meta)

    tables = {
        "s": pd.DataFrame(output.s + 1, columns=ids),
        "beta": pd.DataFrame(
            output.unit_betas.reshape(output.n_draws, I * dim),
            columns=[f"beta_{u}_{k}" for u in ids for k in range(dim)],
        ),
        "xi": pd.DataFrame(output.unit_xis, columns=ids),
        "w": pd.DataFrame(
            output.w.reshape(output.n_draws, I * T),
            columns=[f"w_{u}_{t}" for u in ids for t in output.times],
        ),
        "scalars": pd.DataFrame(
            {
                "sigma2": output.sigma2,
                "tau2": output.tau2,
                "rho": output.rho,
                "alpha": output.alpha,
                "k": output.k,
            }
        ),
        "loglik": pd.DataFrame(output.loglik, columns=ids),
    }
    for name in GROUPS:
        _write_table(tables[name], os.path.join(path, f"{name}.csv"), level)
    logger.info(f"Saved {output.n_draws} draws to {path}")


def load_chain(path: str) -> ChainOutput:
    if not os.path.isdir(path):
        raise DataError("Draw directory does not exist", {"Directory": path})
    meta = read_meta(os.path.join(path, "meta"))
    for key in ("unit_ids", "times", "p", "draws"):
        if key not in meta:
            raise DataError("Missing key in meta", {"Key": key, "Directory": path})
    ids = meta.pop("unit_ids").split(",")
    times = [_parse_label(t) for t in meta.pop("times").split(",")]
    p = int(meta.pop("p"))
    m = int(meta.pop("draws"))
    acceptance = {
        key[len("acceptance_"):]: float(meta.pop(key))
        for key in list(meta)
        if key.startswith("acceptance_")
    }
    extra = {}
    if "chains" in meta:
        extra["chains"] = int(meta.pop("chains"))
    for key in [k for k in meta if k.startswith("scaling_")]:
        extra[key] = meta.pop(key)

    I, T, dim = len(ids), len(times), p + 1
    tables = {name: _read_table(os.path.join(path, f"{name}.csv")) for name in GROUPS}
    expected = {"s": I, "beta": I * dim, "xi": I, "w": I * T, "scalars": len(SCALARS), "loglik": I}
    for name, df in tables.items():
        if df.shape != (m, expected[name]):
            raise DataError(
                "Draw file has the wrong shape",
                {"File": name, "Expected": (m, expected[name]), "Got": df.shape},
            )
    if list(tables["s"].columns) != ids:
        raise DataError("Unit ids in s.csv do not match meta", {"Directory": path})

    scalars = tables["scalars"]
    return ChainOutput(
        ids,
        times,
        tables["s"].to_numpy(dtype=int) - 1,
        tables["beta"].to_numpy(dtype=float).reshape(m, I, dim),
        tables["xi"].to_numpy(dtype=float),
        tables["w"].to_numpy(dtype=float).reshape(m, I, T),
        scalars["sigma2"].to_numpy(dtype=float),
        scalars["tau2"].to_numpy(dtype=float),
        scalars["rho"].to_numpy(dtype=float),
        scalars["alpha"].to_numpy(dtype=float),
        scalars["k"].to_numpy(dtype=int),
        tables["loglik"].to_numpy(dtype=float),
        acceptance,
        meta,
        extra,
    )
