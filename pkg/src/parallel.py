import logging
from concurrent.futures import ProcessPoolExecutor

from config import CFG
from streams import block_streams

log = logging.getLogger(__name__)


def run_blocks(fn, master_seed: int, tag: str, replicates: int, *, block_size: int | None = None,
               workers: int | None = None, args: tuple = ()):
    """
    Run fn(stream, n, *args) once per replicate block and return the results in
    block order. fn must be a module-level function so it can be sent to worker
    processes. The block split only depends on (replicates, block_size), which
    makes the reduction independent of the worker count.
    """
    bs = int(block_size or CFG.BLOCK_SIZE)
    nw = int(workers or CFG.WORKERS)
    blocks = block_streams(master_seed, tag, int(replicates), bs)
    if nw <= 1 or len(blocks) <= 1:
        return [fn(s, n, *args) for s, n in blocks]
    log.debug("%s: %d blocks on %d workers", tag, len(blocks), nw)
    with ProcessPoolExecutor(max_workers=nw) as pool:
        futures = [pool.submit(fn, s, n, *args) for s, n in blocks]
        return [f.result() for f in futures]
