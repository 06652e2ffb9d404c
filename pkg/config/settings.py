import os
from dotenv import load_dotenv
from pydantic import BaseModel

load_dotenv()

class Settings(BaseModel):
    # Logging
    LOG_LEVEL: str = os.getenv("KUBM_LOG_LEVEL", "INFO")
    LOG_DIR: str = os.getenv("KUBM_LOG_DIR", "logs")

    # Outputs
    OUTPUT_DIR: str = os.getenv("KUBM_OUTPUT_DIR", "outputs")

    # Default master seed when --seed is not given
    SEED: int = int(os.getenv("KUBM_SEED", "0"))

settings = Settings()
