import os
import sys

# Thread pinning must happen before numpy is imported anywhere.
if os.environ.get('SWIM_DETERMINISTIC') == '1':
    for name in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ[name] = '1'

from asad.cli import main

if __name__ == '__main__':
    sys.exit(main())
