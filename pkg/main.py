"""bentoframe - FastAPI control surface for the File Operations API dispatcher."""

from fastapi import FastAPI, status

from app.api.fsapi import registry
from app.api.routes import router as fs_router
from app.core.config import settings
from app.core.logging import configure_logging
from app.models.schemas import HealthResponse

configure_logging()

# Create FastAPI application
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description="Userspace file-system framework: mount images, dispatch file operations, live-upgrade",
    docs_url="/docs",
    redoc_url="/redoc",
)


@app.get(
    "/health",
    response_model=HealthResponse,
    status_code=status.HTTP_200_OK,
    tags=["Health"],
    summary="Health check endpoint",
)
def health_check():
    """
    Health check endpoint.

    Returns:
        HealthResponse: API health status and the number of mounted file systems
    """
    return HealthResponse(
        status="healthy",
        version=settings.VERSION,
        environment=settings.ENVIRONMENT,
        mounts=len(registry),
    )


app.include_router(fs_router, prefix=settings.API_V1_PREFIX, tags=["File systems"])


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=settings.HOST, port=settings.PORT)
