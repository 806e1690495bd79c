// DOM bootstrap: wires the session controller, graph renderer, and API
// client to the static page. State flows one way: every action mutates
// the controller, then render() redraws everything from its view.

import { ApiClient } from "./api.js";
import { renderGraph } from "./graph.js";
import { SessionController } from "./session.js";

const DEFAULT_PORT = 8077;

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) {
    throw new Error(`missing page element: ${id}`);
  }
  return found as T;
}

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  if (override) {
    return override;
  }
  return `http://${window.location.hostname || "127.0.0.1"}:${DEFAULT_PORT}`;
}

async function boot(): Promise<void> {
  const api = new ApiClient(apiBase());
  const controller = new SessionController(api);

  const patientSelect = element<HTMLSelectElement>("patient");
  const historyList = element<HTMLUListElement>("history");
  const commentBox = element<HTMLTextAreaElement>("comment");
  const submitButton = element<HTMLButtonElement>("submit");
  const errorBanner = element<HTMLDivElement>("error-banner");
  const turnsList = element<HTMLOListElement>("turns");
  const graphBox = element<HTMLDivElement>("graph");
  const graphCaption = element<HTMLParagraphElement>("graph-caption");

  function render(): void {
    const view = controller.view;

    submitButton.disabled = view.inFlight || view.patientId === null;
    submitButton.textContent = view.inFlight ? "predicting..." : "predict";

    errorBanner.textContent = view.error ?? "";
    errorBanner.hidden = view.error === null;

    historyList.replaceChildren(
      ...view.history.map((entry) => {
        const item = document.createElement("li");
        item.textContent = `${entry.code} ${entry.name}`;
        return item;
      }),
    );

    turnsList.replaceChildren(
      ...view.turns.map((turn, index) => {
        const item = document.createElement("li");
        item.className = "turn";
        const comment = document.createElement("p");
        comment.className = "turn-comment";
        comment.textContent = turn.comment === "" ? "(no comment)" : turn.comment;
        const codes = document.createElement("p");
        codes.className = "turn-codes";
        codes.textContent = turn.codes.join(", ") || "(no codes)";
        const diff = controller.diffForTurn(index);
        const delta = document.createElement("p");
        delta.className = "turn-diff";
        if (index > 0) {
          const added = diff.added.length ? `+${diff.added.join(", +")}` : "";
          const removed = diff.removed.length ? `-${diff.removed.join(", -")}` : "";
          delta.textContent = [added, removed].filter(Boolean).join("  ") || "no change";
        }
        const explanation = document.createElement("p");
        explanation.className = "turn-explanation";
        explanation.textContent = turn.explanation;
        item.append(comment, codes, delta, explanation);
        return item;
      }),
    );

    if (view.latestGraph !== null) {
      const latest = view.turns[view.turns.length - 1];
      const result = renderGraph(graphBox, view.latestGraph, latest.names);
      graphCaption.textContent = result.error
        ? ""
        : `${result.nodeCount} nodes, ${result.edgeCount} edges`;
    } else {
      graphBox.replaceChildren();
      graphCaption.textContent = "no prediction yet";
    }
  }

  submitButton.addEventListener("click", async () => {
    render();
    await controller.submitComment(commentBox.value.trim());
    render();
  });

  patientSelect.addEventListener("change", async () => {
    try {
      await controller.loadPatient(patientSelect.value);
    } catch (err) {
      errorBanner.textContent = `cannot load patient: ${String(err)}`;
      errorBanner.hidden = false;
      return;
    }
    render();
  });

  const patients = await api.listPatients();
  patientSelect.replaceChildren(
    ...patients.map((id) => {
      const option = document.createElement("option");
      option.value = id;
      option.textContent = id;
      return option;
    }),
  );
  if (patients.length > 0) {
    patientSelect.value = patients[0];
    await controller.loadPatient(patients[0]);
  }
  render();
}

boot().catch((err) => {
  const banner = document.getElementById("error-banner");
  if (banner) {
    banner.textContent = `console failed to start: ${String(err)}`;
    (banner as HTMLElement).hidden = false;
  }
});
