"""Contact-event localization on a cylindrical end-effector from a
six-microphone vibration array, with a physics-inspired simulator standing
in for the robot."""

from .audio_io import (EventRecord, MultiChannelClip, ProprioTrace, read_clip,
                       write_clip)
from .errors import VibrolocError
from .features import (GccSet, MelSpectrogram, TdoaEstimate, augment,
                       gcc_phat_all, gcc_phat_pair, mel_spectrogram,
                       tdoa_estimate)
from .geometry import (ContactPoint, CylinderSpec, PointCloud, SensorLayout,
                       chamfer_rms, default_layout, geodesic_distance, med,
                       project_to_surface, wrap_angle)
from .localize import (FeatureExtractor, ModalityFlags, evaluate,
                       multilaterate, preprocessing_ablation, train_model)
from .mapping import (BranchScene, Capsule, StrikePlan, default_scene,
                      execute_mapping, plan_strikes, score_map)
from .preprocess import (NoiseProfile, NormStats, PipelineConfig,
                         fit_noise_profile, normalize, spectral_gate,
                         trim_to_window)
from .regressor import ContactRegressor, TrainConfig, loss
from .simulate import (DatasetPlan, ModalProfile, SimConfig, SplitSpec,
                       StrikeSpec, default_plan, synth_dataset, synth_event)

__version__ = "0.1.0"
