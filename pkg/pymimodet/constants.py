from types import MappingProxyType

MODULATIONS = MappingProxyType({
    "qam4":     4,
    "qam16":    16,
    "qam64":    64,
})

# dB, at 64x32 i.i.d.
DEFAULT_TRAIN_SNR_DB = MappingProxyType({
    4:      (4.0, 9.0),
    16:     (11.0, 16.0),
    64:     (18.0, 23.0),
})

MODEL_KINDS = ("mmnet-iid", "mmnet", "oampnet")
CLASSIC_DETECTORS = ("zf", "mf", "mmse", "vblast", "amp", "oamp", "ml")
DETECTOR_NAMES = ("zf", "mf", "mmse", "vblast", "amp", "oamp", "oampnet", "mmnet-iid", "mmnet", "ml")

SIGMA2_FLOOR = 1e-12
V2_FLOOR = 1e-9
PIVOT_RTOL = 1e-12

DEFAULT_LAYERS = 10
AMP_ITERATIONS = 50
OAMP_ITERATIONS = 10
AMP_DIVERGENCE_FACTOR = 1e3
ML_BUDGET = 2 ** 20

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TRAIN_BATCH_SIZE = 500
ONLINE_FIRST_ITERS = 1000
ONLINE_REST_ITERS = 3

ANDERSON_CRITICAL_5PCT = 0.786
ANDERSON_MIN_SAMPLES = 8

SIGNALS_PER_COHERENCE = 100

MCHAN_MAGIC = b"MCHAN1"
MCHAN_VERSION = 1
MPARM_MAGIC = b"MPARM1"
MPARM_VERSION = 1
MPARM_KIND_TAGS = MappingProxyType({
    "mmnet-iid":    0,
    "mmnet":        1,
    "oampnet":      2,
})

THREADS_ENV = "MIMO_THREADS"

SER_CSV_HEADER = ("detector", "snr_db", "errors", "symbols", "ser", "wall_seconds")
TRACE_CSV_HEADER = ("layer", "stage", "metric", "value")
ANDERSON_CSV_HEADER = ("layer", "tx", "anderson", "pass")

# stream-id namespaces
STREAM_CHANNEL = 1
STREAM_DATA = 2
STREAM_TRAIN = 3
STREAM_HELDOUT = 4
STREAM_DIAG = 6
