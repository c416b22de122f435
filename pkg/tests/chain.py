"""Run a pushdown function over in-memory file images (no target involved)."""

from storepush.functions import Done, Fallback, Resubmit, StepBudget


def run_chain(fn, images, fd, offset, length, scratch, max_steps=1000):
    """Returns ``(outcome, reads)`` where reads lists ``(fd, offset, length)``."""
    reads = []
    budget = StepBudget(1 << 20)
    for _ in range(max_steps):
        reads.append((fd, offset, length))
        out = fn.step(images[fd][offset:offset + length], scratch, budget)
        if isinstance(out, Resubmit):
            fd, offset, length = out.fd_index, out.offset, out.length
            continue
        assert isinstance(out, (Done, Fallback))
        return out, reads
    raise AssertionError("chain did not terminate")
