# Based on: https://gist.github.com/tliron/81dd915166b0bfc64be08b4f8e22c835

import itertools
import multiprocessing
import traceback
from queue import Queue
from threading import Thread, Lock


class FixedThreadPoolExecutor(object):
    """
    Executes tasks in a fixed thread pool.

    Results and raised exceptions are kept by submission id, so whatever the
    scheduling, callers read them back in the order tasks were submitted.
    Numerical code relies on this for deterministic reductions.

    Example::

        with FixedThreadPoolExecutor(4) as executor:
            for fold in range(5):
                executor.submit(score_fold, fold)
            executor.drain()
            executor.raise_first()
            accuracies = executor.returns
    """

    _STOP = object()

    def __init__(self, size=None, timeout=None, print_exceptions=False):
        """
        :param size: Number of threads in the pool (fixed). Defaults to the cpu count.
        :param timeout: Timeout in seconds for blocking queue operations.
        :param print_exceptions: Print tracebacks of failing tasks.
        """
        self.size = size if size is not None else multiprocessing.cpu_count()
        self.timeout = timeout
        self.print_exceptions = print_exceptions

        self._tasks = Queue()
        self._returns = {}
        self._exceptions = {}
        self._ids = itertools.count()
        self._lock = Lock()
        self._workers = [FixedThreadPoolExecutor._Worker(self, index) for index in range(self.size)]

    def submit(self, fn, *args, **kwargs):
        """Queue a task; returns its submission id."""
        task_id = next(self._ids)
        self._tasks.put((task_id, fn, args, kwargs), timeout=self.timeout)
        return task_id

    def drain(self):
        """Block until every queued task has finished; workers stay alive."""
        self._tasks.join()

    def close(self):
        """Drain, then stop all workers. No submissions afterwards."""
        if self._workers is None:
            return
        self.drain()
        for _ in self._workers:
            self._tasks.put(FixedThreadPoolExecutor._STOP, timeout=self.timeout)
        for worker in self._workers:
            worker.join(self.timeout)
        self._workers = None

    @property
    def is_alive(self):
        """True if any of the worker threads are alive."""
        return bool(self._workers) and any(worker.is_alive() for worker in self._workers)

    @property
    def returns(self):
        """Returned values of the successful tasks, in submission order."""
        return [self._returns[k] for k in sorted(self._returns)]

    @property
    def exceptions(self):
        """Raised exceptions, in submission order."""
        return [self._exceptions[k] for k in sorted(self._exceptions)]

    def outcomes(self, n_tasks):
        """Result or exception of each of the first n_tasks tasks, by id."""
        return [self._exceptions[k] if k in self._exceptions else self._returns[k]
                for k in range(n_tasks)]

    def raise_first(self):
        """Raise the exception of the earliest failing task, if any."""
        exceptions = self.exceptions
        if exceptions:
            raise exceptions[0]

    class _Worker(Thread):
        """Worker thread; runs tasks until it receives the stop marker."""

        def __init__(self, executor, index):
            super().__init__(name='FixedThreadPoolExecutor{}'.format(index))
            self.executor = executor
            self.daemon = True
            self.start()

        def run(self):
            while self.executor._execute_next_task():
                pass

    def _execute_next_task(self):
        task = self._tasks.get(timeout=self.timeout)
        if task is FixedThreadPoolExecutor._STOP:
            self._tasks.task_done()
            return False
        task_id, fn, args, kwargs = task
        try:
            self._returns[task_id] = fn(*args, **kwargs)
        except Exception as e:
            self._exceptions[task_id] = e
            if self.print_exceptions:
                with self._lock:
                    traceback.print_exc()
        finally:
            self._tasks.task_done()
        return True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, tb):
        self.close()
        return False
