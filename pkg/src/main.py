import sys
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from src.api.v1 import selection_routes
from src.core.config import get_config
from src.core.logger import get_logger
from src.core.logger import shutdown_logging as close_loggers

logger = get_logger(__name__)


settings = get_config()


async def shutdown_logging():
    # Cleanup logger resources
    try:
        logger.info("Closing logger resources")
        close_loggers()
    except Exception as e:
        print(f"Error during logger cleanup: {e}", file=sys.stderr)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"Configuration loaded: {settings}")
    logger.info(f"Starting {settings.APP_NAME} in {settings.ENV} environment with LOG LEVEL = {settings.LOG_LEVEL}")
    yield
    logger.info(f"Shutting down {settings.APP_NAME}")
    await shutdown_logging()


app = FastAPI(
    title=settings.APP_NAME,
    version=settings.VERSION,
    debug=settings.LOG_LEVEL == "DEBUG",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get(settings.BASE_URL + "/status", tags=["Service Status"])
async def status():
    response = {
        "message": f"{settings.APP_NAME} is up",
        "version": settings.VERSION,
        "exact_gibbs_cap": settings.EXACT_GIBBS_CAP,
        "enumeration_cap": settings.ENUMERATION_CAP,
    }
    logger.debug(f"status: {response}")
    return response


app.include_router(selection_routes.router, prefix=settings.BASE_URL, tags=["Sensor Selection"])


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("src.main:app", host=settings.HOST, port=settings.PORT)
