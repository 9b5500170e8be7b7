//! Per-backend admission control: a concurrency cap plus a token bucket.

use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{Mutex, OwnedSemaphorePermit, Semaphore};
use tokio::time::Instant;

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    capacity: f64,
    per_sec: f64,
    refilled_at: Instant,
}

impl Bucket {
    fn refill(&mut self, now: Instant) {
        let dt = now.duration_since(self.refilled_at).as_secs_f64();
        self.tokens = (self.tokens + dt * self.per_sec).min(self.capacity);
        self.refilled_at = now;
    }
}

#[derive(Debug)]
pub struct Admission {
    slots: Arc<Semaphore>,
    bucket: Mutex<Bucket>,
}

impl Admission {
    /// `burst` requests may start back to back; after that starts are paced
    /// at `requests_per_minute`.
    pub fn new(max_concurrency: usize, requests_per_minute: u32, burst: usize) -> Self {
        let capacity = burst.max(1) as f64;
        Self {
            slots: Arc::new(Semaphore::new(max_concurrency.max(1))),
            bucket: Mutex::new(Bucket {
                tokens: capacity,
                capacity,
                per_sec: f64::from(requests_per_minute.max(1)) / 60.0,
                refilled_at: Instant::now(),
            }),
        }
    }

    /// Waits for a concurrency slot and a rate token.
    pub async fn acquire(&self) -> OwnedSemaphorePermit {
        let permit = self
            .slots
            .clone()
            .acquire_owned()
            .await
            .expect("semaphore never closed");
        loop {
            let wait = {
                let mut bucket = self.bucket.lock().await;
                bucket.refill(Instant::now());
                if bucket.tokens >= 1.0 {
                    bucket.tokens -= 1.0;
                    return permit;
                }
                Duration::from_secs_f64((1.0 - bucket.tokens) / bucket.per_sec)
            };
            tokio::time::sleep(wait).await;
        }
    }
}
