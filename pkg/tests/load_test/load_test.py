import logging
import os
import random

from locust import HttpUser, between, task

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

base_url = os.environ.get("LWM_NOTIFIER_URL", "http://127.0.0.1:8081")
domains = os.environ.get("LWM_LOAD_DOMAINS", "example.com,example.org,example.net").split(",")

logger.info("Using notifier URL: %s", base_url)


class SubjectUser(HttpUser):
    """Simulates a subject polling the notifier for its wild-card query."""

    wait_time = between(1, 3)  # Wait 1-3 seconds between tasks
    host = base_url

    def on_start(self) -> None:
        self.query = f"*.{random.choice(domains)}"
        self.subscribe()

    def subscribe(self) -> None:
        response = self.client.post("/lwm/subscribe", json={"query": self.query}, name="/lwm/subscribe")
        response.raise_for_status()
        subscription = response.json()
        self.subscription_id = subscription["id"]
        self.since = subscription["last_acknowledged_index"]

    @task(4)
    def whats_new(self) -> None:
        with self.client.get(
            "/lwm/new",
            params={"id": self.subscription_id, "since": self.since},
            catch_response=True,
            name="/lwm/new",
        ) as response:
            if response.status_code == 200:
                notifications = response.json()["notifications"]
                if notifications:
                    self.since = notifications[-1]["sth_index"]
                self.environment.events.request.fire(
                    request_type="GET",
                    name="/lwm/new proof bytes",
                    response_time=0,
                    response_length=sum(len(n["proof"]) for n in notifications),
                    response=response,
                    context={},
                )
            elif response.status_code == 410:
                # Evicted from the cache; a real subject would read the batch from the log.
                response.success()
                self.subscribe()
            else:
                response.failure(f"Unexpected status code: {response.status_code}")

    @task(1)
    def single_notification(self) -> None:
        with self.client.get(
            "/lwm/notification",
            params={"id": self.subscription_id, "sth_index": self.since},
            catch_response=True,
            name="/lwm/notification",
        ) as response:
            if response.status_code in (200, 409, 410, 425):
                response.success()
            else:
                response.failure(f"Unexpected status code: {response.status_code}")
