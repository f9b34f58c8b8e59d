CHECKPOINT_MAGIC = b'CRAM'
CHECKPOINT_VERSION = 1
DTYPE_F64 = 0
DTYPE_F32 = 1
REPORT_SCHEMA_VERSION = 1
LIBRARY_VERSION = '0.3.0'

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_VERIFICATION = 5

DEFAULT_RHO = 0.05
DEFAULT_MULTI_SPARSITIES = (0.5, 0.7, 0.9)
DEFAULT_CALIBRATION_SIZE = 100
DEFAULT_BNT_BATCHES = 100
DEFAULT_BNT_BATCH_SIZE = 32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
