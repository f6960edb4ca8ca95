from minmaxsim.data import AugmentConfig
from minmaxsim.models import HeadConfig, ModelConfig, SegNetConfig

SMALL = ModelConfig(seg=SegNetConfig(encoder_base_channels=8),
                    classifier=HeadConfig(16, 3, 32), projector=HeadConfig(16, 2, 16))
AUG32 = AugmentConfig(target_size=(32, 32))
