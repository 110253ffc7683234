"""Process-level settings read from the environment using Pydantic."""

from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """cauvis-lab settings, overridable with CAUVIS_LAB_* environment variables."""

    model_config = SettingsConfigDict(env_prefix='CAUVIS_LAB_', env_file='.env', extra='ignore', case_sensitive=False)

    # Caps the worker threads used by `sweep`
    threads: int = Field(1, ge=1)
    log_level: str = 'INFO'

    # 'matrix' is the naive DFT-matrix path, 'numpy' the FFT fast path
    fft_backend: Literal['numpy', 'matrix'] = 'numpy'

    @property
    def use_fft(self) -> bool:
        return self.fft_backend == 'numpy'


settings = Settings()
