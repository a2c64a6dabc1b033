from .config import (ActivationConfig, TrainingConfig, config_from_dict,
                     load_dataset_csv, make_synthetic_classification,
                     save_dataset_csv, split_parties)
from .protocol import (ForwardTrace, GradientMsg, ModelState, PartyState,
                       ProtocolError, ServerState, TrainingResult, aggregate,
                       build_schedule, finalize, local_backward, local_forward,
                       prepare, run_training)
from .wire import Frame, MsgType, WireError, decode_ciphertext, decode_frame, \
    encode_ciphertext, encode_frame

__all__ = [name for name in dir() if not name.startswith("_")]
