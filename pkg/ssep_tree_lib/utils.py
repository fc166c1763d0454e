import asyncio
import shutil
from concurrent.futures import ProcessPoolExecutor
from io import StringIO
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import aiofiles
import aiofiles.os as aioos
import pandas as pd

T = TypeVar("T")


class CapExceededError(RuntimeError):
    def __init__(self, what: str, required: int, cap: int) -> None:
        super().__init__(what, required, cap)
        self.what = what
        self.required = required
        self.cap = cap

    def __str__(self) -> str:
        return f"{self.what} would need {self.required} states but the configured cap is {self.cap}"



async def async_rmtree(path: Path):
    await asyncio.to_thread(shutil.rmtree, path)


def render_csv(frame: pd.DataFrame, schema: str) -> str:
    """
    the first line is a versioned schema comment, e.g. `# ssep-tree xi v1`
    """
    body = frame.to_csv(index=False, lineterminator="\n")
    return f"# {schema}\n{body}"


def parse_csv(text: str) -> tuple[str, pd.DataFrame]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("CSV artifact is missing its schema header line")
    schema = lines[0][1:].strip()
    frame = pd.read_csv(
        StringIO("\n".join(lines[1:])), dtype=str, keep_default_na=False
    )
    return schema, frame


async def async_write_text(path: Path, content: str) -> None:
    await aioos.makedirs(path.parent, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf8") as f:
        await f.write(content)


async def async_read_text(path: Path) -> str:
    if not await aioos.path.exists(path):
        raise FileNotFoundError(f"Could not find file {path}")
    async with aiofiles.open(path, "r", encoding="utf8") as f:
        return await f.read()


def split_batches(total: int, batch_size: int) -> list[tuple[int, int]]:
    return [
        (start, min(start + batch_size, total)) for start in range(0, total, batch_size)
    ]


async def gather_batches(
    func: Callable[..., T],
    batches: Sequence[tuple[int, int]],
    workers: int,
    *args: Any,
) -> list[T]:
    """
    runs `func(*args, start, stop)` for every batch and returns the results
    in batch order, whatever order the workers finish in
    """
    if workers <= 1:
        return [await asyncio.to_thread(func, *args, start, stop) for start, stop in batches]

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            loop.run_in_executor(pool, func, *args, start, stop) for start, stop in batches
        ]
        return list(await asyncio.gather(*futures))


def flatten(chunks: Iterable[list[T]]) -> list[T]:
    return [item for chunk in chunks for item in chunk]
