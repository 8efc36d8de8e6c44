/** Stale-revision recovery: on a 409 the client resyncs to the server's
 * committed revision and retries exactly once.
 */

import { beforeEach, describe, expect, it } from "vitest";

import { ApiError, ServiceClient } from "../src/api.js";
import { AnnotationController } from "../src/controller.js";
import { FakeService } from "./fake_server.js";

describe("revision conflicts", () => {
  let server: FakeService;
  let ctl: AnnotationController;

  beforeEach(async () => {
    server = new FakeService();
    ctl = new AnnotationController(new ServiceClient("http://svc", server.fetch), "vol1", [16, 16, 4]);
    await ctl.open();
    await ctl.newLesion();
  });

  it("resyncs and retries exactly once, converging to the server state", async () => {
    // another writer advanced the session: the client's revision 0 is stale
    server.revision = 5;

    const outcome = await ctl.placeClick(8, 8, { zoom: 1, panX: 0, panY: 0 });
    expect(outcome).toBe("applied");

    const attempts = server.clickRequests();
    expect(attempts).toHaveLength(2); // original + one retry, no more
    expect(attempts[0].body).toMatchObject({ revision: 0 });
    expect(attempts[1].body).toMatchObject({ revision: 5 }); // resynced before retrying
    expect(ctl.state.revision).toBe(6); // the server's post-click revision
    expect(ctl.instancePlanes.get(1)!.get(0)!.some((v) => v)).toBe(true);
  });

  it("surfaces the conflict if the retry is also stale", async () => {
    server.revision = 5;
    server.conflictsToInject = 2; // both the original and the retry collide

    await expect(ctl.placeClick(8, 8, { zoom: 1, panX: 0, panY: 0 })).rejects.toSatisfy(
      (err: unknown) => err instanceof ApiError && err.status === 409,
    );
    expect(server.clickRequests()).toHaveLength(2); // never a second retry
    expect(ctl.state.pending).toBe(false);
    expect(ctl.clicks).toHaveLength(0); // nothing recorded locally
  });

  it("does not retry non-conflict errors", async () => {
    const outcome = ctl.placeClick(viewportEdgeClick(), 8, { zoom: 1, panX: 0, panY: 0 });
    await expect(outcome).resolves.toBe("ignored"); // out of canvas: never sent

    // in-bounds for the client's notion of the volume, rejected by the server
    const small = new FakeService(4, 4, 4);
    const ctl2 = new AnnotationController(
      new ServiceClient("http://svc", small.fetch),
      "vol1",
      [16, 16, 4], // client believes the volume is larger than the server does
    );
    await ctl2.open();
    await ctl2.newLesion();
    await expect(ctl2.placeClick(10, 10, { zoom: 1, panX: 0, panY: 0 })).rejects.toSatisfy(
      (err: unknown) => err instanceof ApiError && err.status === 400,
    );
    expect(small.clickRequests()).toHaveLength(1); // no retry on 400
  });
});

function viewportEdgeClick(): number {
  return 1e9;
}
