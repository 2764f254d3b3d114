import { ApiClient } from "./api.js";
import { AlertStream } from "./sse.js";
import { DashboardStore } from "./store.js";
import { DashboardView } from "./view.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

async function bootstrap(): Promise<void> {
  const baseUrl = param("api", window.location.origin);
  const reviewer = param("reviewer", "clinician");
  const timeZone = param("tz", "America/Toronto");

  const api = new ApiClient(baseUrl);
  const store = new DashboardStore();
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  new DashboardView(root, store, api, { reviewer, timeZone }).render();

  // backfill current state, then follow the live stream with cursor resume
  try {
    for (const record of await api.events()) {
      store.applyEventDoc(record.event, record.cursor);
    }
    await store.refreshModels(api);
  } catch (err) {
    store.setConnection("stale");
  }

  const stream = new AlertStream({
    url: (cursor) => api.alertStreamUrl(cursor),
    cursor: store.maxCursor(),
    onRecord: (record) => store.applyAlertData(record.data),
    onStatus: (status) => store.setConnection(status),
  });
  stream.start();

  // closed/reviewed transitions are not pushed on the alert stream; refresh
  // the listing periodically so the review queue stays current
  setInterval(() => {
    void api
      .events()
      .then((records) => {
        for (const record of records) store.applyEventDoc(record.event, record.cursor);
      })
      .catch(() => store.setConnection("stale"));
  }, 3000);
}

void bootstrap();
