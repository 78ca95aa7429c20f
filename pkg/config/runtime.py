import os
from dotenv import load_dotenv

load_dotenv()

class RuntimeConfig:
    
    def __init__(self, log_level: str, log_format: str, default_out_dir: str, torch_threads: int):
        self.__log_level = log_level
        self.__log_format = log_format
        self.__default_out_dir = default_out_dir
        self.__torch_threads = torch_threads

    @property
    def log_level(self) -> str:
        return self.__log_level
    
    @property
    def log_format(self) -> str:
        return self.__log_format
    
    @property
    def default_out_dir(self) -> str:
        return self.__default_out_dir
    
    @property
    def torch_threads(self) -> int:
        return self.__torch_threads


config = RuntimeConfig(
    log_level=os.getenv("CITYTRANSFER_LOG_LEVEL", "INFO").upper(),
    log_format=os.getenv("CITYTRANSFER_LOG_FORMAT", "%(asctime)s %(levelname)s %(name)s: %(message)s"),
    default_out_dir=os.getenv("CITYTRANSFER_OUT_DIR", "runs"),
    # intra-op threads; 1 keeps CPU reductions bit-reproducible
    torch_threads=int(os.getenv("CITYTRANSFER_TORCH_THREADS", "1"))
)
